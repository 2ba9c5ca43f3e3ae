"""Synthetic corpora and score matrices for experiments and integration tests."""

from __future__ import annotations

import numpy as np

from .corpus import Sample, VisionPrior
from .experts import SimulatedExpert, SimulatedExpertParams, embed_latent_quality

DEFAULT_DOMAINS = ("caption", "chart", "dialogue", "reasoning")

_TAG_WORDS = ("cat", "sofa", "sign", "bottle", "tree", "laptop", "person", "car", "dog", "table")
_OCR_WORDS = ("SALE 50%", "EXIT", "Main St", "OPEN", "Lot 7", "Platform 2", "Menu", "Gate B")


def make_synthetic_samples(per_domain: int, domains=DEFAULT_DOMAINS, seed: int = 0,
                           source: str = "synthetic") -> list[Sample]:
    """Samples with latent quality ~ Uniform[0,5], also embedded in the answer text.

    The embedded tag lets score-only backends (HTTP mocks, rescoring judges)
    recover the latent quality without access to the record itself.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for d_index, domain in enumerate(domains):
        for j in range(per_domain):
            y = float(rng.uniform(0.0, 5.0))
            sid = f"{domain}-{j:04d}"
            samples.append(
                Sample(
                    id=sid,
                    image_ref=f"img://{sid}.png",
                    question=f"What does image {sid} show?",
                    answer=embed_latent_quality(f"A synthetic description of scene {sid}.", y),
                    domain=domain,
                    source=source,
                    latent_truth=y,
                )
            )
    return samples


def make_synthetic_priors(samples, seed: int = 0) -> dict[str, VisionPrior]:
    """A small deterministic tag/OCR prior for every sample."""
    rng = np.random.default_rng(seed)
    priors = {}
    for sample in samples:
        n_tags = int(rng.integers(1, 4))
        n_ocr = int(rng.integers(0, 3))
        tags = [_TAG_WORDS[int(rng.integers(len(_TAG_WORDS)))] for _ in range(n_tags)]
        ocr = [_OCR_WORDS[int(rng.integers(len(_OCR_WORDS)))] for _ in range(n_ocr)]
        priors[sample.id] = VisionPrior(tags=tags, ocr=ocr)
    return priors


def heteroscedastic_noise_tables(domains, n_experts: int, seed: int,
                                 sigma_choices=(0.3, 0.6, 1.2)) -> list[dict[str, float]]:
    """Per-expert noise-std maps with the sigma set permuted across experts per domain."""
    if n_experts != len(sigma_choices):
        raise ValueError("sigma_choices must provide one value per expert")
    rng = np.random.default_rng(seed)
    tables: list[dict[str, float]] = [{} for _ in range(n_experts)]
    for domain in domains:
        perm = rng.permutation(n_experts)
        for m in range(n_experts):
            tables[m][domain] = float(sigma_choices[perm[m]])
    return tables


def make_simulated_roster(noise_tables, seed: int, biases=None,
                          prefix: str = "expert") -> list[SimulatedExpert]:
    """One simulated expert per noise table, with derived per-expert seeds."""
    roster = []
    for m, table in enumerate(noise_tables):
        params = SimulatedExpertParams(
            noise_std=dict(table),
            bias=dict(biases[m]) if biases else {},
            seed=seed + m,
        )
        roster.append(SimulatedExpert(f"{prefix}_{m + 1}", params))
    return roster


def simulate_score_matrix(latent, domains, noise_tables, seed: int,
                          biases=None) -> np.ndarray:
    """Vectorized draw of clip(latent + bias + noise) for each expert.

    Statistically identical to calling a simulated expert per sample; used where
    an experiment needs many seeds cheaply.
    """
    latent = np.asarray(latent, dtype=float)
    n = len(latent)
    m_count = len(noise_tables)
    rng = np.random.default_rng(seed)
    scores = np.empty((n, m_count))
    for m in range(m_count):
        sigma = np.array([noise_tables[m].get(d, noise_tables[m].get("default", 0.0))
                          for d in domains])
        bias = 0.0
        if biases:
            bias = np.array([biases[m].get(d, biases[m].get("default", 0.0)) for d in domains])
        scores[:, m] = np.clip(latent + bias + rng.normal(0.0, 1.0, size=n) * sigma, 0.0, 5.0)
    return scores
