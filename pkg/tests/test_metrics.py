import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datacritic.fusion import fuse_pipeline
from datacritic.metrics import (
    UndefinedCorrelationError,
    estimator_comparison,
    kendall_tau,
    pearson_r,
    score_distribution_summary,
)
from datacritic.synthetic import heteroscedastic_noise_tables, simulate_score_matrix

from oracles import kendall_loop, kendall_pair_count, pearson_direct, quantile_linear


class TestPearson:
    def test_perfect_correlation(self):
        x = [1.0, 2.0, 5.0, 7.0]
        assert pearson_r(x, x) == pytest.approx(1.0)
        assert pearson_r(x, [-v for v in x]) == pytest.approx(-1.0)

    def test_reference_value(self):
        x, y = [1.0, 2.0, 3.0], [1.0, 2.0, 4.0]
        assert pearson_r(x, y) == pytest.approx(pearson_direct(x, y), abs=1e-12)
        assert pearson_r(x, y) == pytest.approx(0.98198, abs=1e-5)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pearson_r([1.0, 2.0], [1.0])


class TestKendall:
    def test_identical_rankings(self):
        x = [3.0, 1.0, 2.0, 5.0]
        assert kendall_tau(x, x) == pytest.approx(1.0)

    def test_reversed(self):
        x = [1.0, 2.0, 3.0, 4.0]
        assert kendall_tau(x, x[::-1]) == pytest.approx(-1.0)

    def test_reference_value(self):
        assert kendall_tau([1, 2, 3], [2, 1, 3]) == pytest.approx(1 / 3, abs=1e-12)
        assert kendall_loop([1, 2, 3], [2, 1, 3]) == pytest.approx(1 / 3, abs=1e-12)

    def test_all_tied_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            kendall_tau([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_matches_pair_count_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(3, 120))
            x = rng.integers(0, 6, size=n).astype(float)
            y = rng.integers(0, 6, size=n).astype(float)
            if np.all(x == x[0]) or np.all(y == y[0]):
                continue
            assert kendall_tau(x, y) == pytest.approx(kendall_pair_count(x, y), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=50)
        y = rng.normal(size=50)
        assert kendall_tau(np.exp(x), y) == pytest.approx(kendall_tau(x, y), abs=1e-12)


@settings(max_examples=60)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=40),
    st.floats(0.1, 5, allow_nan=False),
    st.floats(-10, 10, allow_nan=False),
)
def test_pearson_affine_invariance(values, scale, shift):
    x = np.array(values)
    y = np.sin(x) + 0.2 * x
    # Tiny spreads underflow the variance to zero, leaving r undefined.
    if np.ptp(x) < 1e-9 or np.ptp(y) < 1e-9:
        return
    base = pearson_r(x, y)
    assert pearson_r(scale * x + shift, y) == pytest.approx(base, abs=1e-9)


class TestEstimatorComparison:
    def test_fused_equals_latent(self):
        rng = np.random.default_rng(3)
        latent = rng.uniform(0, 5, size=40)
        experts = np.clip(latent[:, None] + rng.normal(0, 0.5, size=(40, 3)), 0, 5)
        report = estimator_comparison(latent, experts, latent)
        assert report["fused"]["mse"] == pytest.approx(0.0, abs=1e-15)
        assert report["fused"]["pearson"] == pytest.approx(1.0)

    def test_noiseless_expert_zero_mse(self):
        rng = np.random.default_rng(4)
        latent = rng.uniform(0.3, 4.7, size=60)
        experts = np.stack([latent, np.clip(latent + rng.normal(0, 1, 60), 0, 5)], axis=1)
        report = estimator_comparison(latent, experts, latent)
        assert report["per_expert"]["expert_1"]["mse"] == pytest.approx(0.0, abs=1e-15)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            estimator_comparison([1.0, 2.0], np.ones((3, 2)), [1.0, 2.0, 3.0])

    def test_heteroscedastic_fusion_beats_single_experts(self):
        domains_list = ["d0", "d1", "d2", "d3"]
        wins = 0
        seeds = range(50)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            domains = [domains_list[i % 4] for i in range(1000)]
            latent = rng.uniform(0, 5, size=1000)
            tables = heteroscedastic_noise_tables(domains_list, 3, seed=seed)
            scores = simulate_score_matrix(latent, domains, tables, seed=seed + 1)
            fused = [l.fused_score for l in fuse_pipeline(scores, domains)]
            report = estimator_comparison(latent, scores, fused)
            fused_r = report["fused"]["pearson"]
            if all(fused_r >= e["pearson"] for e in report["per_expert"].values()):
                wins += 1
        assert wins >= 45

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        latent = rng.uniform(0, 5, size=30)
        experts = np.clip(latent[:, None] + rng.normal(0, 0.4, (30, 3)), 0, 5)
        fused = np.clip(latent + rng.normal(0, 0.2, 30), 0, 5)
        base = estimator_comparison(latent, experts, fused)
        perm = rng.permutation(30)
        shuffled = estimator_comparison(latent[perm], experts[perm], fused[perm])
        assert shuffled["fused"]["mse"] == pytest.approx(base["fused"]["mse"], abs=1e-12)
        assert shuffled["naive_average"]["pearson"] == pytest.approx(
            base["naive_average"]["pearson"], abs=1e-12)


class TestDistributionSummary:
    def test_constant_scores(self):
        summary = score_distribution_summary([2.0] * 8)
        assert summary["std"] == 0.0
        assert len(set(summary["quantiles"].values())) == 1
        assert sum(summary["histogram"]["counts"]) == 8

    def test_uniform_grid_median(self):
        grid = np.arange(0, 5.25, 0.25)
        summary = score_distribution_summary(grid)
        assert summary["quantiles"]["p50"] == pytest.approx(2.5)

    def test_quantiles_match_sort_oracle(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(0, 5, size=137)
        summary = score_distribution_summary(scores)
        for p in (5, 25, 50, 75, 95):
            assert summary["quantiles"][f"p{p}"] == pytest.approx(
                quantile_linear(scores.tolist(), p / 100), abs=1e-12)

    def test_histogram_covers_all_scores(self):
        rng = np.random.default_rng(7)
        scores = rng.uniform(0, 5, size=200)
        summary = score_distribution_summary(scores)
        hist = summary["histogram"]
        assert hist["bin_width"] == 0.25
        assert sum(hist["counts"]) == 200
        assert hist["bin_edges"][0] <= scores.min()
        assert hist["bin_edges"][-1] >= scores.max()
