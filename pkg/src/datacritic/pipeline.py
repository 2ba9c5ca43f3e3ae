"""Stage orchestration: prior ingestion, critique fan-out, fusion, toy critic
training, rewriting, rescoring, and refined-corpus emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_io
from .corpus import (
    CandidatePool,
    CritiqueRecord,
    FusedLabel,
    RefinedEntry,
    Sample,
    VisionPrior,
)
from .experts import (
    HttpExpertBackend,
    RetryPolicy,
    SimulatedExpert,
    SimulatedExpertParams,
    request_critiques,
    request_rewrites,
    serialize_vision_prior,
)
from .fusion import FusionConfig, fuse_pipeline
from .grpo import (
    GrpoConfig,
    ToyPolicy,
    default_critic_vocab,
    make_rollout_group,
    sample_group,
    training_step,
)
from .rewards import total_reward

logger = logging.getLogger(__name__)

STAGE1_PRIORS = "stage1_priors.jsonl"
STAGE2_CRITIQUES = "stage2_critiques.jsonl"
STAGE2_FUSED = "stage2_fused.jsonl"
STAGE3_POLICY = "stage3_policy.json"
STAGE3_CURVE = "stage3_curve.csv"
STAGE4_POOLS = "stage4_candidate_pools.jsonl"
STAGE4_REFINED = "stage4_refined.jsonl"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """The pipeline configuration is invalid."""


class StageError(Exception):
    """A stage's preconditions are not met."""


@dataclass
class TrainConfig:
    """Toy-critic training knobs for the optimization stage."""

    learning_rate: float = 0.3
    rollout_length: int = 7

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.rollout_length < 1:
            raise ConfigError("rollout_length must be >= 1")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "rollout_length": self.rollout_length}


@dataclass
class PipelineConfig:
    corpus_path: str
    out_dir: str
    priors_path: str | None = None
    experts: list[dict] = field(default_factory=list)
    rescorer: dict | None = None
    fusion: FusionConfig = field(default_factory=FusionConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    concurrency_limit: int = 8
    seed: int = 0
    allow_partial: bool = False
    allow_missing_priors: bool = False
    filter_threshold: float | None = None

    def validate(self) -> None:
        if not self.corpus_path:
            raise ConfigError("paths.corpus is required")
        if not self.out_dir:
            raise ConfigError("paths.out_dir is required")
        if not self.experts:
            raise ConfigError("expert roster must be non-empty")
        seen = set()
        for spec in self.experts:
            eid = spec.get("expert_id")
            if not eid:
                raise ConfigError("every expert spec needs an expert_id")
            if eid in seen:
                raise ConfigError(f"duplicate expert_id {eid!r}")
            seen.add(eid)
            if spec.get("kind") not in ("simulated", "http"):
                raise ConfigError(f"expert {eid!r}: kind must be 'simulated' or 'http'")
            if spec["kind"] == "http" and not spec.get("endpoint"):
                raise ConfigError(f"expert {eid!r}: http backends need an endpoint")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        try:
            self.fusion.validate()
            self.grpo.validate()
        except ValueError as exc:
            raise ConfigError(str(exc))
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "paths": {
                "corpus": self.corpus_path,
                "priors": self.priors_path,
                "out_dir": self.out_dir,
            },
            "experts": self.experts,
            "rescorer": self.rescorer,
            "fusion": self.fusion.to_dict(),
            "grpo": self.grpo.to_dict(),
            "train": self.train.to_dict(),
            "concurrency_limit": self.concurrency_limit,
            "seed": self.seed,
            "allow_partial": self.allow_partial,
            "allow_missing_priors": self.allow_missing_priors,
            "filter_threshold": self.filter_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        paths = data.get("paths", {})
        try:
            cfg = cls(
                corpus_path=paths.get("corpus", ""),
                priors_path=paths.get("priors"),
                out_dir=paths.get("out_dir", ""),
                experts=data.get("experts", []),
                rescorer=data.get("rescorer"),
                fusion=FusionConfig.from_dict(data.get("fusion", {})),
                grpo=GrpoConfig.from_dict(data.get("grpo", {})),
                train=TrainConfig(**data.get("train", {})),
                concurrency_limit=data.get("concurrency_limit", 8),
                seed=data.get("seed", 0),
                allow_partial=data.get("allow_partial", False),
                allow_missing_priors=data.get("allow_missing_priors", False),
                filter_threshold=data.get("filter_threshold"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))
        cfg.validate()
        return cfg


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return PipelineConfig.from_dict(data)


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_backend(spec: dict, default_seed: int):
    """Instantiate an expert backend from its config spec."""
    kind = spec.get("kind")
    expert_id = spec.get("expert_id", "expert")
    if kind == "simulated":
        params = SimulatedExpertParams(
            noise_std=dict(spec.get("noise_std", {})),
            bias=dict(spec.get("bias", {})),
            seed=spec.get("seed", default_seed),
        )
        return SimulatedExpert(expert_id, params)
    if kind == "http":
        import os

        headers = dict(spec.get("headers", {}))
        key_header = spec.get("api_key_header")
        key_env = spec.get("api_key_env")
        if key_header and key_env:
            value = os.environ.get(key_env)
            if value:
                headers[key_header] = value
        retry = RetryPolicy(
            max_attempts=spec.get("max_attempts", 3),
            backoff_s=spec.get("backoff_s", 0.25),
            deadline_s=spec.get("deadline_s", 60.0),
        )
        return HttpExpertBackend(
            expert_id,
            spec["endpoint"],
            retry=retry,
            headers=headers,
            request_timeout_s=spec.get("request_timeout_s", 30.0),
        )
    raise ConfigError(f"unknown backend kind {kind!r}")


def build_roster(config: PipelineConfig):
    return [build_backend(spec, config.seed) for spec in config.experts]


def build_rescorer(config: PipelineConfig):
    """The rescoring judge; defaults to a noiseless simulated scorer."""
    if config.rescorer is None:
        return SimulatedExpert("rescorer", SimulatedExpertParams(seed=config.seed))
    return build_backend(config.rescorer, config.seed)


def run_stage1(samples, priors_path, allow_missing: bool = False,
               out_dir=None) -> dict[str, VisionPrior]:
    """Attach a vision prior to every sample, or an empty one when allowed."""
    priors = corpus_io.load_priors(priors_path) if priors_path else {}
    missing = [s.id for s in samples if s.id not in priors]
    if missing and not allow_missing:
        raise StageError(
            f"{len(missing)} sample(s) have no vision prior: {missing[:10]}"
        )
    attached = {s.id: priors.get(s.id, VisionPrior()) for s in samples}
    if out_dir is not None:
        corpus_io.save_priors(attached, Path(out_dir) / STAGE1_PRIORS)
    return attached


def run_stage2(samples, priors, backends, fusion_config: FusionConfig,
               out_dir=None, concurrency_limit: int = 8, allow_partial: bool = False):
    """Fan critiques out to the roster and fuse the scores into labels."""
    critiques = request_critiques(samples, priors, backends,
                                  concurrency_limit=concurrency_limit,
                                  allow_partial=allow_partial)
    by_key = {(c.sample_id, c.expert_id): c.score for c in critiques}
    expert_ids = [b.expert_id for b in backends]
    usable = [s for s in samples if all((s.id, e) in by_key for e in expert_ids)]
    if len(usable) < len(samples):
        logger.warning("dropping %d sample(s) with incomplete critiques",
                       len(samples) - len(usable))
    if not usable:
        raise StageError("no sample has a complete set of critiques")
    matrix = np.array([[by_key[(s.id, e)] for e in expert_ids] for s in usable])
    fused = fuse_pipeline(matrix, [s.domain for s in usable], fusion_config,
                          sample_ids=[s.id for s in usable], expert_ids=expert_ids)
    if out_dir is not None:
        corpus_io.save_corpus(critiques, Path(out_dir) / STAGE2_CRITIQUES)
        corpus_io.save_corpus(fused, Path(out_dir) / STAGE2_FUSED)
    return critiques, fused


def run_stage3(fused, grpo_config: GrpoConfig, train_config: TrainConfig,
               seed: int = 0, out_dir=None, rollout_source=None):
    """Train the toy critic for one epoch over the fused labels.

    ``rollout_source(label, policy, rng)`` may inject fixed rollouts (token
    sequences); by default each group is sampled from the current policy.
    """
    if not fused:
        raise StageError("stage 3 needs at least one fused label")
    vocab = default_critic_vocab()
    policy = ToyPolicy.uniform(vocab, train_config.rollout_length)
    ref = policy.copy()
    rng = np.random.default_rng([seed, 3])
    curve = []
    for step, label in enumerate(fused):
        reward_fn = lambda text: total_reward(text, label.fused_score)  # noqa: E731
        if rollout_source is None:
            group = sample_group(policy, label.sample_id, reward_fn, grpo_config, rng)
        else:
            rollouts = rollout_source(label, policy, rng)
            rewards = [reward_fn(policy.decode(t)) for t in rollouts]
            group = make_rollout_group(label.sample_id, policy, rollouts, rewards)
        policy, stats = training_step([group], policy, ref, grpo_config,
                                      train_config.learning_rate)
        curve.append({
            "step": step,
            "objective": stats["objective"],
            "mean_reward": stats["mean_reward"],
            "kl": stats["kl"],
        })
    if out_dir is not None:
        out = Path(out_dir)
        with (out / STAGE3_POLICY).open("w", encoding="utf-8") as fh:
            json.dump(policy.to_dict(), fh)
            fh.write("\n")
        with (out / STAGE3_CURVE).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "objective", "mean_reward", "kl"])
            writer.writeheader()
            writer.writerows(curve)
    return policy, curve


def select_best(pool: CandidatePool) -> tuple[int, str, str]:
    """Argmax over rescored values; ties prefer the original, then lower index."""
    if not pool.candidates:
        raise StageError(f"empty candidate pool for {pool.sample_id!r}")
    if pool.rescored is None or len(pool.rescored) != len(pool.candidates):
        raise StageError(f"pool for {pool.sample_id!r} has no rescored values")
    best = 0
    for i, value in enumerate(pool.rescored):
        if value > pool.rescored[best]:
            best = i
    source = "original" if best == 0 else f"expert_{best}"
    return best, pool.candidates[best], source


def _rescore_pools(samples, pools, rescorer, priors, concurrency_limit: int):
    from concurrent.futures import ThreadPoolExecutor

    by_id = {s.id: s for s in samples}

    def score_one(sample_id: str, candidate: str) -> float:
        sample = replace(by_id[sample_id], answer=candidate)
        prior_text = serialize_vision_prior(priors.get(sample_id, VisionPrior()))
        return rescorer.critique(sample, prior_text).score

    tasks = [(pool.sample_id, j, candidate)
             for pool in pools for j, candidate in enumerate(pool.candidates)]
    with ThreadPoolExecutor(max_workers=max(1, concurrency_limit)) as executor:
        futures = {(sid, j): executor.submit(score_one, sid, cand)
                   for sid, j, cand in tasks}
        scores = {key: future.result() for key, future in futures.items()}
    for pool in pools:
        pool.rescored = [scores[(pool.sample_id, j)] for j in range(len(pool.candidates))]


def _merged_rationale(sample, best_index: int, expert_ids, rationale_by_key,
                      fused_label: FusedLabel) -> str:
    if best_index > 0:
        return rationale_by_key[(sample.id, expert_ids[best_index - 1])]
    # Original kept: fall back to the most trusted expert in this domain.
    best_expert = expert_ids[0]
    best_weight = -1.0
    for expert_id in expert_ids:
        weight = fused_label.weights_used.get(expert_id, {}).get(sample.domain, 0.0)
        if weight > best_weight:
            best_expert = expert_id
            best_weight = weight
    return rationale_by_key[(sample.id, best_expert)]


def run_stage4(samples, priors, critiques, fused, backends, rescorer,
               out_dir=None, concurrency_limit: int = 8, allow_partial: bool = False):
    """Rewrite, rescore the candidate pools, and emit one refined entry per sample."""
    if len(backends) != 3:
        raise ConfigError("candidate selection expects a roster of exactly 3 experts")
    fused_by_id = {f.sample_id: f for f in fused}
    rationale_by_key = {(c.sample_id, c.expert_id): c.rationale for c in critiques}
    rewrites = request_rewrites(samples, critiques, fused, backends,
                                concurrency_limit=concurrency_limit,
                                allow_partial=allow_partial)
    pools = [CandidatePool(sample_id=s.id, candidates=[s.answer] + rewrites[s.id])
             for s in samples if s.id in rewrites]
    _rescore_pools(samples, pools, rescorer, priors, concurrency_limit)
    expert_ids = [b.expert_id for b in backends]
    by_id = {s.id: s for s in samples}
    refined = []
    for pool in pools:
        sample = by_id[pool.sample_id]
        best, answer, source = select_best(pool)
        refined.append(
            RefinedEntry(
                sample_id=sample.id,
                question=sample.question,
                selected_answer=answer,
                confidence=fused_by_id[sample.id].fused_score,
                merged_rationale=_merged_rationale(sample, best, expert_ids,
                                                   rationale_by_key, fused_by_id[sample.id]),
                selected_source=source,
            )
        )
    if out_dir is not None:
        corpus_io.save_corpus(pools, Path(out_dir) / STAGE4_POOLS)
        corpus_io.save_corpus(refined, Path(out_dir) / STAGE4_REFINED)
    return pools, refined


def filter_corpus(samples, fused, threshold: float):
    """Keep only samples whose fused score reaches the threshold."""
    fused_by_id = {f.sample_id: f.fused_score for f in fused}
    missing = [s.id for s in samples if s.id not in fused_by_id]
    if missing:
        raise StageError(f"samples without fused labels: {missing[:10]}")
    return [s for s in samples if fused_by_id[s.id] >= threshold]


def run_all(config: PipelineConfig) -> dict:
    """Execute all four stages and write a run manifest."""
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = corpus_io.load_corpus(config.corpus_path, "sample")
    backends = build_roster(config)
    rescorer = build_rescorer(config)
    manifest = {"config_hash": config_hash(config), "seed": config.seed, "stages": []}

    def record(name: str, started: float, outputs: list[str]) -> None:
        manifest["stages"].append({
            "name": name,
            "seconds": round(time.perf_counter() - started, 6),
            "outputs": outputs,
        })

    t = time.perf_counter()
    priors = run_stage1(samples, config.priors_path,
                        allow_missing=config.allow_missing_priors, out_dir=out_dir)
    record("stage1_priors", t, [str(out_dir / STAGE1_PRIORS)])

    t = time.perf_counter()
    critiques, fused = run_stage2(samples, priors, backends, config.fusion,
                                  out_dir=out_dir,
                                  concurrency_limit=config.concurrency_limit,
                                  allow_partial=config.allow_partial)
    record("stage2_critique_fusion", t,
           [str(out_dir / STAGE2_CRITIQUES), str(out_dir / STAGE2_FUSED)])

    t = time.perf_counter()
    run_stage3(fused, config.grpo, config.train, seed=config.seed, out_dir=out_dir)
    record("stage3_critic_training", t,
           [str(out_dir / STAGE3_POLICY), str(out_dir / STAGE3_CURVE)])

    t = time.perf_counter()
    fused_ids = {f.sample_id for f in fused}
    kept = [s for s in samples if s.id in fused_ids]
    run_stage4(kept, priors, critiques, fused, backends, rescorer,
               out_dir=out_dir, concurrency_limit=config.concurrency_limit,
               allow_partial=config.allow_partial)
    record("stage4_refinement", t,
           [str(out_dir / STAGE4_POOLS), str(out_dir / STAGE4_REFINED)])

    with (out_dir / MANIFEST).open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest
