"""Domain-aware fusion of multi-expert scores into one consensus label.

The pipeline is: per-domain z-normalization of each expert's scores,
signal-to-noise weighting of experts per domain, shrinkage of those weights
toward the cross-domain mean (strength grows as a domain's sample count
shrinks), weighted combination per sample, and a robust percentile stretch
back onto the [0, scale_max] rubric. Population standard deviations are used
throughout; quantiles interpolate linearly between order statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import FusedLabel


class FusionError(Exception):
    """Base class for fusion failures."""


class IncompleteMatrixError(FusionError):
    """The score matrix has missing entries."""


class DegenerateWeightsError(FusionError):
    """A domain's weights vanish after shrinkage and cannot be normalized."""


class MissingWeightsError(FusionError):
    """A sample's domain has no entry in the weight table."""


@dataclass
class FusionConfig:
    """Constants of the fusion pipeline.

    ``epsilon`` guards divisions by zero std, ``lam`` is the shrinkage
    strength, and the two percentiles bound the stretch onto [0, scale_max].
    """

    epsilon: float = 1e-3
    lam: float = 100.0
    q_low_pct: float = 0.05
    q_high_pct: float = 0.95
    scale_max: float = 5.0

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not (0 <= self.q_low_pct < self.q_high_pct <= 1):
            raise ValueError("require 0 <= q_low_pct < q_high_pct <= 1")
        if not self.scale_max > 0:
            raise ValueError("scale_max must be > 0")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "q_low_pct": self.q_low_pct,
            "q_high_pct": self.q_high_pct,
            "scale_max": self.scale_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        known = dict(data)
        if "lambda" in known:
            known["lam"] = known.pop("lambda")
        cfg = cls(**known)
        cfg.validate()
        return cfg


@dataclass
class DomainStats:
    """Per-(expert, domain) score mean/std and per-domain sample counts."""

    means: dict[tuple[int, str], float]
    stds: dict[tuple[int, str], float]
    counts: dict[str, int]
    n_experts: int

    @property
    def domains(self) -> list[str]:
        return list(self.counts)


@dataclass
class WeightTable:
    """Raw and shrunk expert weights plus the shrinkage bookkeeping."""

    raw: dict[tuple[int, str], float]
    shrunk: dict[tuple[int, str], float]
    global_mean: dict[int, float]
    alpha: dict[str, float]


def _as_matrix(score_matrix) -> np.ndarray:
    arr = np.asarray(score_matrix, dtype=float)
    if arr.ndim != 2:
        raise FusionError(f"score matrix must be 2-D (samples x experts), got ndim={arr.ndim}")
    if arr.shape[0] == 0:
        raise FusionError("empty corpus: score matrix has no samples")
    if np.isnan(arr).any():
        missing = np.argwhere(np.isnan(arr))
        i, m = missing[0]
        raise IncompleteMatrixError(f"missing score for sample {i}, expert {m}")
    return arr


def _check_domains(arr: np.ndarray, domains) -> list[str]:
    domains = list(domains)
    if len(domains) != arr.shape[0]:
        raise FusionError(
            f"domains length {len(domains)} does not match {arr.shape[0]} samples"
        )
    return domains


def _domain_order(domains: list[str]) -> list[str]:
    order: list[str] = []
    for d in domains:
        if d not in order:
            order.append(d)
    return order


def compute_domain_stats(score_matrix, domains) -> DomainStats:
    """Population mean/std of each expert's scores within each domain."""
    arr = _as_matrix(score_matrix)
    domains = _check_domains(arr, domains)
    labels = np.asarray(domains, dtype=object)
    means: dict[tuple[int, str], float] = {}
    stds: dict[tuple[int, str], float] = {}
    counts: dict[str, int] = {}
    for d in _domain_order(domains):
        mask = labels == d
        counts[d] = int(mask.sum())
        block = arr[mask]
        for m in range(arr.shape[1]):
            means[(m, d)] = float(block[:, m].mean())
            stds[(m, d)] = float(block[:, m].std())
    return DomainStats(means=means, stds=stds, counts=counts, n_experts=arr.shape[1])


def z_normalize(score: float, mu: float, sigma: float, epsilon: float) -> float:
    """(score - mu) / (sigma + epsilon); epsilon keeps zero-std domains finite."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    return (score - mu) / (sigma + epsilon)


def z_normalize_matrix(score_matrix, domains, stats: DomainStats, epsilon: float) -> np.ndarray:
    """Apply z-normalization sample-wise using each sample's domain statistics."""
    arr = _as_matrix(score_matrix)
    domains = _check_domains(arr, domains)
    out = np.empty_like(arr)
    for i, d in enumerate(domains):
        for m in range(arr.shape[1]):
            out[i, m] = z_normalize(arr[i, m], stats.means[(m, d)], stats.stds[(m, d)], epsilon)
    return out


def compute_raw_weights(score_matrix, domains, epsilon: float) -> dict[tuple[int, str], float]:
    """Signal-to-noise weights per (expert, domain).

    Signal is the expert's score std within the domain; noise is the std of the
    expert's residual against the per-sample cross-expert mean.
    """
    arr = _as_matrix(score_matrix)
    domains = _check_domains(arr, domains)
    labels = np.asarray(domains, dtype=object)
    consensus = arr.mean(axis=1)
    residuals = arr - consensus[:, None]
    raw: dict[tuple[int, str], float] = {}
    for d in _domain_order(domains):
        mask = labels == d
        for m in range(arr.shape[1]):
            sig = float(arr[mask, m].std())
            noise = float(residuals[mask, m].std())
            raw[(m, d)] = sig / (noise + epsilon)
    return raw


def shrink_weights(raw: dict[tuple[int, str], float], counts: dict[str, int],
                   lam: float) -> WeightTable:
    """Shrink per-domain weights toward the cross-domain mean and normalize.

    alpha_d = N_d / (N_d + lam); small domains lean on the global mean weight.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    experts = sorted({m for m, _ in raw})
    domain_order = list(counts)
    for key, value in raw.items():
        if not np.isfinite(value) or value < 0:
            raise FusionError(f"raw weight {value!r} for {key} must be finite and >= 0")
    global_mean = {
        m: float(np.mean([raw[(m, d)] for d in domain_order])) for m in experts
    }
    alpha: dict[str, float] = {}
    shrunk: dict[tuple[int, str], float] = {}
    for d in domain_order:
        n_d = counts[d]
        alpha[d] = 1.0 if n_d + lam == 0 else n_d / (n_d + lam)
        pre = [alpha[d] * raw[(m, d)] + (1 - alpha[d]) * global_mean[m] for m in experts]
        total = float(np.sum(pre))
        if total <= 0:
            raise DegenerateWeightsError(f"weights for domain {d!r} sum to {total} after shrinkage")
        for m, value in zip(experts, pre):
            shrunk[(m, d)] = value / total
    return WeightTable(raw=dict(raw), shrunk=shrunk, global_mean=global_mean, alpha=alpha)


def fuse_samples(z_matrix, weights: WeightTable, domains) -> np.ndarray:
    """Weighted per-sample combination of z-scores using each sample's domain weights."""
    arr = np.asarray(z_matrix, dtype=float)
    domains = _check_domains(arr, domains)
    zhat = np.empty(arr.shape[0])
    for i, d in enumerate(domains):
        if (0, d) not in weights.shrunk:
            raise MissingWeightsError(f"no weights for domain {d!r}")
        zhat[i] = sum(weights.shrunk[(m, d)] * arr[i, m] for m in range(arr.shape[1]))
    return zhat


def percentile_rescale(z_values, config: FusionConfig | None = None) -> np.ndarray:
    """Map fused z-values onto [0, scale_max] via a clipped percentile stretch.

    Quantiles are taken over the whole input. A degenerate stretch (the two
    quantiles within epsilon) maps everything to the midpoint.
    """
    config = config or FusionConfig()
    z = np.asarray(z_values, dtype=float)
    if z.size == 0:
        raise FusionError("need at least one value to rescale")
    q_low = float(np.quantile(z, config.q_low_pct))
    q_high = float(np.quantile(z, config.q_high_pct))
    if q_high - q_low < config.epsilon:
        return np.full(z.shape, config.scale_max / 2.0)
    scaled = (z - q_low) / (q_high - q_low)
    return config.scale_max * np.clip(scaled, 0.0, 1.0)


def fuse_pipeline(score_matrix, domains, config: FusionConfig | None = None,
                  sample_ids=None, expert_ids=None) -> list[FusedLabel]:
    """Run the full fusion pipeline and return one FusedLabel per sample.

    Each label records the normalized per-domain weights that produced it.
    """
    config = config or FusionConfig()
    config.validate()
    arr = _as_matrix(score_matrix)
    domains = _check_domains(arr, domains)
    n, m_count = arr.shape
    if sample_ids is None:
        sample_ids = [str(i) for i in range(n)]
    if expert_ids is None:
        expert_ids = [f"expert_{m + 1}" for m in range(m_count)]
    if len(sample_ids) != n or len(expert_ids) != m_count:
        raise FusionError("sample_ids/expert_ids lengths do not match the score matrix")

    stats = compute_domain_stats(arr, domains)
    z = z_normalize_matrix(arr, domains, stats, config.epsilon)
    raw = compute_raw_weights(arr, domains, config.epsilon)
    table = shrink_weights(raw, stats.counts, config.lam)
    zhat = fuse_samples(z, table, domains)
    shat = percentile_rescale(zhat, config)

    labels = []
    for i, d in enumerate(domains):
        weights_used = {
            expert_ids[m]: {d: table.shrunk[(m, d)]} for m in range(m_count)
        }
        labels.append(
            FusedLabel(
                sample_id=sample_ids[i],
                fused_score=float(shat[i]),
                fused_z=float(zhat[i]),
                weights_used=weights_used,
            )
        )
    return labels


def expected_risk(weights, noise_vars) -> float:
    """Expected squared error of a weighted combination of unbiased noisy raters."""
    w = np.asarray(weights, dtype=float)
    v = np.asarray(noise_vars, dtype=float)
    if w.shape != v.shape:
        raise ValueError("weights and noise_vars must have the same length")
    if (v < 0).any():
        raise ValueError("variances must be >= 0")
    return float(np.sum(w * w * v))


def shrinkage_risk_delta(w_d, w_bar, alpha_d: float, num_domains: int) -> float:
    """Risk change from shrinking a domain's weights toward the global mean.

    Always <= 0; zero exactly when the domain weights equal the global mean or
    alpha_d = 1.
    """
    w = np.asarray(w_d, dtype=float)
    g = np.asarray(w_bar, dtype=float)
    if w.shape != g.shape:
        raise ValueError("w_d and w_bar must have the same length")
    if not 0 <= alpha_d <= 1:
        raise ValueError("alpha_d must lie in [0,1]")
    if num_domains < 1:
        raise ValueError("num_domains must be >= 1")
    return float(-((1 - alpha_d) ** 2 / num_domains) * np.sum((w - g) ** 2))
