"""Correlation and estimator-quality metrics for critic scores."""

from __future__ import annotations

import numpy as np
from scipy import stats as scipy_stats


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined for the given input (constant or all tied)."""


def _check_pair(x, y, min_len: int = 2):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("inputs must be 1-D")
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < min_len:
        raise ValueError(f"need at least {min_len} observations")
    return x, y


def pearson_r(x, y) -> float:
    """Sample Pearson correlation; raises on constant input."""
    x, y = _check_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))


def kendall_tau(x, y) -> float:
    """Tie-corrected (tau-b) Kendall rank correlation."""
    x, y = _check_pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("tau undefined when one side is all tied")
    result = scipy_stats.kendalltau(x, y, variant="b")
    tau = float(result.statistic)
    if not np.isfinite(tau):
        raise UndefinedCorrelationError("tau undefined for this input")
    return tau


def mse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.mean((a - b) ** 2))


def _rescale_to_range(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affinely map the values' observed range onto [lo, hi]."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax == vmin:
        return np.full(values.shape, (lo + hi) / 2.0)
    return lo + (values - vmin) * (hi - lo) / (vmax - vmin)


def estimator_comparison(latent, expert_scores, fused, expert_ids=None) -> dict:
    """MSE and Pearson of each expert, the naive average, and the fused estimator.

    Every estimator except the fused one (already on the target scale) is
    affinely rescaled so its range matches the latent's observed range before
    the MSE is taken; Pearson is scale-invariant and uses raw values.
    """
    latent = np.asarray(latent, dtype=float)
    experts = np.asarray(expert_scores, dtype=float)
    fused = np.asarray(fused, dtype=float)
    if experts.ndim != 2:
        raise ValueError("expert_scores must be 2-D (samples x experts)")
    if len(latent) != experts.shape[0] or len(latent) != len(fused):
        raise ValueError("latent, expert_scores, and fused must have matching lengths")
    if expert_ids is None:
        expert_ids = [f"expert_{m + 1}" for m in range(experts.shape[1])]
    lo, hi = float(latent.min()), float(latent.max())

    def entry(values: np.ndarray, rescale: bool) -> dict:
        scored = _rescale_to_range(values, lo, hi) if rescale else values
        return {"mse": mse(scored, latent), "pearson": pearson_r(values, latent)}

    report = {
        "per_expert": {
            expert_ids[m]: entry(experts[:, m], rescale=True)
            for m in range(experts.shape[1])
        },
        "naive_average": entry(experts.mean(axis=1), rescale=True),
        "fused": entry(fused, rescale=False),
    }
    return report


HISTOGRAM_BIN_WIDTH = 0.25
_SUMMARY_PERCENTILES = (5, 25, 50, 75, 95)


def score_distribution_summary(scores) -> dict:
    """Deterministic distribution summary: moments, quantiles, fixed-width histogram."""
    arr = np.asarray(scores, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("need a non-empty 1-D score vector")
    lo = np.floor(arr.min() / HISTOGRAM_BIN_WIDTH) * HISTOGRAM_BIN_WIDTH
    hi = np.ceil(arr.max() / HISTOGRAM_BIN_WIDTH) * HISTOGRAM_BIN_WIDTH
    if hi <= lo:
        hi = lo + HISTOGRAM_BIN_WIDTH
    edges = np.round(np.arange(lo, hi + HISTOGRAM_BIN_WIDTH / 2, HISTOGRAM_BIN_WIDTH), 10)
    counts, _ = np.histogram(arr, bins=edges)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "quantiles": {f"p{p}": float(np.quantile(arr, p / 100)) for p in _SUMMARY_PERCENTILES},
        "histogram": {
            "bin_width": HISTOGRAM_BIN_WIDTH,
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    }
