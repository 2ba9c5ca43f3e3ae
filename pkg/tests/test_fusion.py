import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from datacritic.fusion import (
    DegenerateWeightsError,
    FusionConfig,
    FusionError,
    IncompleteMatrixError,
    MissingWeightsError,
    compute_domain_stats,
    compute_raw_weights,
    expected_risk,
    fuse_pipeline,
    fuse_samples,
    percentile_rescale,
    shrink_weights,
    shrinkage_risk_delta,
    z_normalize,
    z_normalize_matrix,
)

from oracles import fusion_oracle


def random_fixture(rng, n=40, n_domains=3, n_experts=3):
    domains = [f"d{rng.integers(n_domains)}" for _ in range(n)]
    scores = rng.uniform(0, 5, size=(n, n_experts))
    return scores, domains


class TestDomainStats:
    def test_mean_and_population_std(self):
        scores = np.array([[1.0], [2.0], [3.0]])
        stats = compute_domain_stats(scores, ["d", "d", "d"])
        assert stats.means[(0, "d")] == pytest.approx(2.0)
        assert stats.stds[(0, "d")] == pytest.approx(math.sqrt(2.0 / 3.0))

    def test_constant_scores_zero_std(self):
        stats = compute_domain_stats([[2.0], [2.0], [2.0]], ["d", "d", "d"])
        assert stats.means[(0, "d")] == 2.0
        assert stats.stds[(0, "d")] == 0.0

    def test_domain_counts(self):
        scores = np.ones((8, 3))
        domains = ["a"] * 3 + ["b"] * 5
        stats = compute_domain_stats(scores, domains)
        assert stats.counts == {"a": 3, "b": 5}

    def test_missing_score_rejected(self):
        scores = np.array([[1.0, np.nan, 2.0]])
        with pytest.raises(IncompleteMatrixError):
            compute_domain_stats(scores, ["d"])

    def test_empty_corpus_rejected(self):
        with pytest.raises(FusionError):
            compute_domain_stats(np.empty((0, 3)), [])


class TestZNormalize:
    def test_score_at_mean_is_zero(self):
        assert z_normalize(2.0, 2.0, 1.3, 1e-3) == 0.0

    def test_reference_value(self):
        assert z_normalize(3.0, 2.0, 0.8165, 1e-3) == pytest.approx(1.0 / 0.8175, abs=1e-12)

    def test_zero_std_guarded_by_epsilon(self):
        assert z_normalize(3.0, 2.0, 0.0, 1e-3) == pytest.approx(1000.0)


class TestRawWeights:
    def test_identical_experts_equal_weights(self):
        rng = np.random.default_rng(0)
        col = rng.uniform(0, 5, size=12)
        scores = np.stack([col, col, col], axis=1)
        raw = compute_raw_weights(scores, ["d"] * 12, 1e-3)
        sig = float(col.std())
        for m in range(3):
            assert raw[(m, "d")] == pytest.approx(sig / 1e-3)

    def test_constant_expert_gets_zero_weight(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(0, 5, size=(10, 3))
        scores[:, 1] = 3.0
        raw = compute_raw_weights(scores, ["d"] * 10, 1e-3)
        assert raw[(1, "d")] == 0.0

    def test_matches_stepwise_oracle(self):
        scores = [[1.0, 2.0, 3.0],
                  [2.0, 2.0, 2.0],
                  [4.0, 1.0, 3.0],
                  [0.0, 5.0, 2.5]]
        domains = ["d"] * 4
        raw = compute_raw_weights(scores, domains, 1e-3)
        expected = fusion_oracle(scores, domains)["raw"]
        for key, value in expected.items():
            assert raw[key] == pytest.approx(value, abs=1e-9)

    def test_single_sample_domain_allowed(self):
        scores = np.array([[1.0, 2.0, 3.0], [2.0, 3.0, 4.0]])
        raw = compute_raw_weights(scores, ["solo", "big"], 1e-3)
        assert raw[(0, "solo")] == 0.0


class TestShrinkWeights:
    def test_alpha_half_at_lambda(self):
        raw = {(m, "d"): 1.0 for m in range(3)}
        table = shrink_weights(raw, {"d": 100}, 100.0)
        assert table.alpha["d"] == pytest.approx(0.5)

    def test_lambda_zero_keeps_raw_proportions(self):
        raw = {(0, "d"): 3.0, (1, "d"): 1.0, (2, "d"): 0.0,
               (0, "e"): 1.0, (1, "e"): 1.0, (2, "e"): 2.0}
        table = shrink_weights(raw, {"d": 10, "e": 5}, 0.0)
        assert table.alpha["d"] == 1.0
        assert table.shrunk[(0, "d")] == pytest.approx(0.75)
        assert table.shrunk[(2, "d")] == pytest.approx(0.0)

    def test_empty_domain_uses_global_mean(self):
        raw = {(0, "d"): 4.0, (1, "d"): 1.0,
               (0, "e"): 2.0, (1, "e"): 3.0}
        table = shrink_weights(raw, {"d": 10, "e": 0}, 100.0)
        assert table.alpha["e"] == 0.0
        w_bar = {0: 3.0, 1: 2.0}
        total = w_bar[0] + w_bar[1]
        assert table.shrunk[(0, "e")] == pytest.approx(w_bar[0] / total)

    def test_all_zero_weights_degenerate(self):
        raw = {(0, "d"): 0.0, (1, "d"): 0.0}
        with pytest.raises(DegenerateWeightsError):
            shrink_weights(raw, {"d": 10}, 100.0)

    def test_per_domain_sums_to_one(self):
        rng = np.random.default_rng(7)
        raw = {(m, d): float(rng.uniform(0.1, 4)) for m in range(3) for d in "abcd"}
        table = shrink_weights(raw, {d: int(rng.integers(1, 500)) for d in "abcd"}, 100.0)
        for d in "abcd":
            assert sum(table.shrunk[(m, d)] for m in range(3)) == pytest.approx(1.0, abs=1e-9)


class TestFuseSamples:
    def test_equal_weights_mean(self):
        raw = {(m, "d"): 1.0 for m in range(3)}
        table = shrink_weights(raw, {"d": 10}, 100.0)
        zhat = fuse_samples(np.array([[1.0, 2.0, 3.0]]), table, ["d"])
        assert zhat[0] == pytest.approx(2.0)

    def test_projection_weight(self):
        raw = {(0, "d"): 1.0, (1, "d"): 0.0, (2, "d"): 0.0}
        table = shrink_weights(raw, {"d": 10}, 0.0)
        zhat = fuse_samples(np.array([[7.0, -3.0, 11.0]]), table, ["d"])
        assert zhat[0] == pytest.approx(7.0)

    def test_matches_dot_product(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(50, 3))
        raw = {(m, "d"): float(rng.uniform(0.5, 2)) for m in range(3)}
        table = shrink_weights(raw, {"d": 50}, 100.0)
        weights = np.array([table.shrunk[(m, "d")] for m in range(3)])
        expected = z @ weights
        assert fuse_samples(z, table, ["d"] * 50) == pytest.approx(expected, abs=1e-12)

    def test_unknown_domain_rejected(self):
        raw = {(0, "d"): 1.0}
        table = shrink_weights(raw, {"d": 10}, 100.0)
        with pytest.raises(MissingWeightsError):
            fuse_samples(np.array([[1.0]]), table, ["other"])


class TestPercentileRescale:
    def test_endpoints_and_midpoint(self):
        # 21 points: the 5% and 95% quantiles land exactly on order statistics.
        z = np.linspace(-2.0, 2.0, 21)
        s = percentile_rescale(z, FusionConfig())
        q_low, q_high = np.quantile(z, [0.05, 0.95])
        assert s[list(z).index(q_low)] == pytest.approx(0.0)
        assert s[list(z).index(q_high)] == pytest.approx(5.0)
        mid = (q_low + q_high) / 2
        idx = int(np.argmin(np.abs(z - mid)))
        assert s[idx] == pytest.approx(2.5)

    def test_constant_vector_maps_to_midpoint(self):
        s = percentile_rescale(np.full(10, 1.7), FusionConfig())
        assert np.all(s == 2.5)

    def test_clipping_bounds(self):
        rng = np.random.default_rng(11)
        s = percentile_rescale(rng.normal(size=500), FusionConfig())
        assert s.min() == 0.0 and s.max() == 5.0


class TestFusePipeline:
    def test_defaults(self):
        cfg = FusionConfig()
        assert cfg.epsilon == 1e-3
        assert cfg.lam == 100.0
        assert cfg.q_low_pct == 0.05 and cfg.q_high_pct == 0.95
        assert cfg.scale_max == 5.0

    def test_identical_experts_preserve_ranking(self):
        rng = np.random.default_rng(5)
        col = rng.uniform(0, 5, size=30)
        scores = np.stack([col, col, col], axis=1)
        labels = fuse_pipeline(scores, ["d"] * 30)
        fused = np.array([l.fused_score for l in labels])
        # Monotone in the common input column (stretch may add clip ties).
        order = np.argsort(col, kind="stable")
        assert np.all(np.diff(fused[order]) >= 0)
        # Ties preserved: equal inputs map to equal outputs
        scores2 = np.stack([col, col, col], axis=1)
        scores2[1] = scores2[0]
        labels2 = fuse_pipeline(scores2, ["d"] * 30)
        assert labels2[0].fused_score == labels2[1].fused_score

    def test_matches_oracle_on_random_fixture(self):
        rng = np.random.default_rng(17)
        scores, domains = random_fixture(rng, n=200, n_domains=4)
        labels = fuse_pipeline(scores, domains)
        expected = fusion_oracle(scores.tolist(), domains)
        for i, label in enumerate(labels):
            assert label.fused_z == pytest.approx(expected["zhat"][i], abs=1e-9)
            assert label.fused_score == pytest.approx(expected["shat"][i], abs=1e-9)

    def test_records_weights_per_sample(self):
        rng = np.random.default_rng(19)
        scores, domains = random_fixture(rng, n=30, n_domains=2)
        labels = fuse_pipeline(scores, domains, sample_ids=[f"s{i}" for i in range(30)],
                               expert_ids=["a", "b", "c"])
        for i, label in enumerate(labels):
            assert label.sample_id == f"s{i}"
            weights = [label.weights_used[e][domains[i]] for e in ("a", "b", "c")]
            assert sum(weights) == pytest.approx(1.0, abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(23)
        scores, domains = random_fixture(rng, n=60, n_domains=3)
        labels = fuse_pipeline(scores, domains)
        perm = rng.permutation(60)
        permuted = fuse_pipeline(scores[perm], [domains[i] for i in perm])
        for j, i in enumerate(perm):
            assert permuted[j].fused_score == pytest.approx(labels[i].fused_score, abs=1e-12)

    def test_homoscedastic_weights_approach_uniform(self):
        # Equal noise for all experts: shrunk weights should settle near 1/3.
        deviations = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            n = 4000
            y = rng.uniform(0, 5, size=n)
            scores = np.clip(y[:, None] + rng.normal(0, 0.5, size=(n, 3)), 0, 5)
            labels = fuse_pipeline(scores, ["d"] * n)
            weights = [labels[0].weights_used[f"expert_{m+1}"]["d"] for m in range(3)]
            deviations.append(max(abs(w - 1 / 3) for w in weights))
        assert float(np.mean(deviations)) < 0.02


class TestRiskAnalytics:
    def test_expected_risk_values(self):
        assert expected_risk([1, 0, 0], [4, 1, 1]) == pytest.approx(4.0)
        assert expected_risk([1 / 3] * 3, [1, 1, 1]) == pytest.approx(1 / 3)
        assert expected_risk([0.2, 0.5, 0.3], [0, 0, 0]) == 0.0

    def test_risk_delta_zero_cases(self):
        w = [0.5, 0.3, 0.2]
        assert shrinkage_risk_delta(w, w, 0.4, 7) == 0.0
        assert shrinkage_risk_delta([0.9, 0.05, 0.05], w, 1.0, 7) == 0.0

    def test_risk_delta_reference_value(self):
        delta = shrinkage_risk_delta([0.6, 0.2, 0.2], [1 / 3] * 3, 0.5, 7)
        expected = -(0.25 / 7) * ((0.6 - 1 / 3) ** 2 + 2 * (0.2 - 1 / 3) ** 2)
        assert delta == pytest.approx(expected, abs=1e-12)
        assert delta == pytest.approx(-0.0038095, abs=1e-6)

    def test_inverse_variance_weights_minimize_risk(self):
        # The simplex minimizer of sum(w^2 sigma^2) is w proportional to 1/sigma^2.
        rng = np.random.default_rng(29)
        for _ in range(5):
            variances = rng.uniform(0.1, 3.0, size=3)
            closed_form = (1 / variances) / np.sum(1 / variances)
            result = optimize.minimize(
                lambda w: expected_risk(w, variances),
                x0=np.full(3, 1 / 3),
                bounds=[(0, 1)] * 3,
                constraints=[{"type": "eq", "fun": lambda w: np.sum(w) - 1}],
                method="SLSQP",
            )
            assert result.success
            assert result.x == pytest.approx(closed_form, abs=1e-3)
            assert expected_risk(closed_form, variances) <= result.fun + 1e-9


@settings(max_examples=200)
@given(
    w=st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=3),
    g=st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=3),
    alpha=st.floats(0, 1, allow_nan=False),
)
def test_risk_delta_never_positive(w, g, alpha):
    assert shrinkage_risk_delta(w, g, alpha, 7) <= 0.0


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=40))
def test_rescale_bounds_and_monotonicity(values):
    z = np.array(values)
    s = percentile_rescale(z, FusionConfig())
    assert np.all(s >= 0.0) and np.all(s <= 5.0)
    order = np.argsort(z, kind="stable")
    assert np.all(np.diff(s[order]) >= 0)
