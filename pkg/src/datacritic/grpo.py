"""Group-relative policy optimization on a small categorical token policy.

The policy is a table of per-position logits over a fixed vocabulary. Scale is
deliberately tiny so the surrogate objective can be paired with exact
categorical KL and analytic gradients checkable by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rewards import (
    MARKER_EVALUATION_REASONS,
    MARKER_QUESTION_ANALYSIS,
    MARKER_SCORING,
    SCORING_CLOSE,
)


class GrpoError(Exception):
    """Raised for malformed rollout groups or non-finite training state."""


@dataclass
class GrpoConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    group_size: int = 128
    adv_eps: float = 1e-8

    def validate(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0,1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not self.adv_eps > 0:
            raise ValueError("adv_eps must be > 0")

    def to_dict(self) -> dict:
        return {
            "clip_eps": self.clip_eps,
            "kl_beta": self.kl_beta,
            "group_size": self.group_size,
            "adv_eps": self.adv_eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GrpoConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg


def default_critic_vocab() -> list[str]:
    """Marker tokens, score digits, and a filler token for critic-style rollouts."""
    return [
        MARKER_QUESTION_ANALYSIS,
        MARKER_EVALUATION_REASONS,
        MARKER_SCORING,
        SCORING_CLOSE,
        "0", "1", "2", "3", "4", "5",
        "ok",
    ]


class ToyPolicy:
    """Position-conditioned categorical policy over a fixed vocabulary."""

    def __init__(self, vocab: list[str], logits):
        self.vocab = list(vocab)
        self.logits = np.asarray(logits, dtype=float)
        if self.logits.ndim != 2 or self.logits.shape[1] != len(self.vocab):
            raise GrpoError("logits must have shape (seq_len, vocab_size)")

    @classmethod
    def uniform(cls, vocab: list[str], seq_len: int) -> "ToyPolicy":
        return cls(vocab, np.zeros((seq_len, len(vocab))))

    @property
    def seq_len(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    @property
    def n_params(self) -> int:
        return self.logits.size

    def get_params(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_params(self, params) -> "ToyPolicy":
        params = np.asarray(params, dtype=float)
        return ToyPolicy(self.vocab, params.reshape(self.logits.shape))

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab, self.logits.copy())

    def log_prob_table(self) -> np.ndarray:
        shifted = self.logits - self.logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def prob_table(self) -> np.ndarray:
        return np.exp(self.log_prob_table())

    def token_log_probs(self, tokens) -> np.ndarray:
        """Per-token log-probability of a sequence, token t conditioned on position t."""
        tokens = list(tokens)
        if len(tokens) > self.seq_len:
            raise GrpoError(f"sequence length {len(tokens)} exceeds policy length {self.seq_len}")
        table = self.log_prob_table()
        return np.array([table[t, v] for t, v in enumerate(tokens)])

    def sample(self, rng: np.random.Generator, length: int | None = None) -> tuple[int, ...]:
        length = self.seq_len if length is None else length
        probs = self.prob_table()
        return tuple(int(rng.choice(self.vocab_size, p=probs[t])) for t in range(length))

    def decode(self, tokens) -> str:
        return " ".join(self.vocab[v] for v in tokens)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "logits": self.logits.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyPolicy":
        return cls(data["vocab"], np.asarray(data["logits"], dtype=float))


@dataclass
class RolloutGroup:
    """G rollouts for one question with frozen sampling-time log-probs and rewards."""

    question_id: str
    rollouts: list[tuple[int, ...]]
    old_log_probs: list[np.ndarray]
    rewards: np.ndarray

    def validate(self) -> None:
        g = len(self.rollouts)
        if g < 1:
            raise GrpoError("group must contain at least one rollout")
        if len(self.old_log_probs) != g or len(self.rewards) != g:
            raise GrpoError("rollouts, old_log_probs, and rewards must align")
        for i, (tokens, lp) in enumerate(zip(self.rollouts, self.old_log_probs)):
            if len(tokens) == 0:
                raise GrpoError(f"rollout {i} is empty")
            if len(lp) != len(tokens):
                raise GrpoError(f"rollout {i}: log-prob length mismatch")
            if not np.all(np.isfinite(lp)):
                raise GrpoError(f"rollout {i}: zero-probability token under the old policy")
        if not np.all(np.isfinite(self.rewards)):
            raise GrpoError("rewards must be finite")


def make_rollout_group(question_id: str, policy_old: ToyPolicy, rollouts, rewards) -> RolloutGroup:
    """Freeze the sampling policy's log-probs for a batch of rollouts."""
    group = RolloutGroup(
        question_id=question_id,
        rollouts=[tuple(t) for t in rollouts],
        old_log_probs=[policy_old.token_log_probs(t) for t in rollouts],
        rewards=np.asarray(rewards, dtype=float),
    )
    group.validate()
    return group


def group_advantage(rewards, adv_eps: float = 1e-8) -> np.ndarray:
    """Standardize rewards against the group mean and spread; one rollout -> 0."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise GrpoError("empty reward group")
    if r.size == 1:
        return np.zeros(1)
    return (r - r.mean()) / (r.std() + adv_eps)


def clipped_term(ratio: float, advantage: float, clip_eps: float) -> float:
    """Pessimistic surrogate term: min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)."""
    if ratio <= 0:
        raise GrpoError(f"ratio must be > 0, got {ratio}")
    clipped = min(max(ratio, 1 - clip_eps), 1 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def kl_divergence(p, q) -> float:
    """Exact categorical KL(p || q); rows are treated as conditioned positions."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if p.shape != q.shape:
        raise GrpoError(f"support mismatch: p has shape {p.shape}, q has shape {q.shape}")
    if np.any((q <= 0) & (p > 0)):
        raise GrpoError("q must be strictly positive wherever p > 0")
    mask = p > 0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * np.log(p[mask] / q[mask])
    return float(terms.sum(axis=1).mean())


def policy_kl(policy: ToyPolicy, ref: ToyPolicy) -> float:
    """KL(policy || ref): summed within each position, averaged over positions."""
    if policy.logits.shape != ref.logits.shape:
        raise GrpoError("policy and reference must have the same shape")
    return kl_divergence(policy.prob_table(), ref.prob_table())


def _surrogate_and_grad(group: RolloutGroup, policy: ToyPolicy, config: GrpoConfig,
                        want_grad: bool):
    log_table = policy.log_prob_table()
    probs = np.exp(log_table)
    advantages = group_advantage(group.rewards, config.adv_eps)
    g = len(group.rollouts)
    total = 0.0
    grad = np.zeros_like(policy.logits) if want_grad else None
    for i, tokens in enumerate(group.rollouts):
        adv = advantages[i]
        old_lp = group.old_log_probs[i]
        coeff = 1.0 / (g * len(tokens))
        for t, v in enumerate(tokens):
            ratio = float(np.exp(log_table[t, v] - old_lp[t]))
            unclipped = ratio * adv
            clipped = min(max(ratio, 1 - config.clip_eps), 1 + config.clip_eps) * adv
            total += coeff * min(unclipped, clipped)
            if want_grad and adv != 0.0 and unclipped <= clipped:
                # d ratio / d logits[t, :] = ratio * (onehot(v) - probs[t, :])
                row = -probs[t] * (coeff * adv * ratio)
                grad[t] += row
                grad[t, v] += coeff * adv * ratio
    return total, grad


def _kl_and_grad(policy: ToyPolicy, ref: ToyPolicy, want_grad: bool):
    log_p = policy.log_prob_table()
    log_q = ref.log_prob_table()
    p = np.exp(log_p)
    diff = log_p - log_q
    per_position = (p * diff).sum(axis=1)
    kl = float(per_position.mean())
    if not want_grad:
        return kl, None
    # d KL_pos / d logits[pos, v] = p_v * (diff_v - KL_pos)
    grad = p * (diff - per_position[:, None]) / policy.seq_len
    return kl, grad


def grpo_objective(group: RolloutGroup, policy: ToyPolicy, ref: ToyPolicy,
                   config: GrpoConfig) -> float:
    """Group mean of per-rollout token-mean clipped terms minus beta * KL to ref."""
    group.validate()
    surrogate, _ = _surrogate_and_grad(group, policy, config, want_grad=False)
    kl, _ = _kl_and_grad(policy, ref, want_grad=False)
    return surrogate - config.kl_beta * kl


def grpo_objective_gradient(group: RolloutGroup, policy: ToyPolicy, ref: ToyPolicy,
                            config: GrpoConfig) -> tuple[float, np.ndarray]:
    """Objective value and its analytic gradient with respect to the policy logits."""
    group.validate()
    surrogate, surr_grad = _surrogate_and_grad(group, policy, config, want_grad=True)
    kl, kl_grad = _kl_and_grad(policy, ref, want_grad=True)
    objective = surrogate - config.kl_beta * kl
    grad = surr_grad - config.kl_beta * kl_grad
    return objective, grad.ravel()


def training_step(groups, policy: ToyPolicy, ref: ToyPolicy, config: GrpoConfig,
                  learning_rate: float):
    """One ascent step on the batch-mean objective; returns (policy, stats)."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be > 0")
    if not groups:
        raise GrpoError("need at least one rollout group")
    objective_sum = 0.0
    grad_sum = np.zeros(policy.n_params)
    reward_sum = 0.0
    for group in groups:
        obj, grad = grpo_objective_gradient(group, policy, ref, config)
        objective_sum += obj
        grad_sum += grad
        reward_sum += float(group.rewards.mean())
    grad_mean = grad_sum / len(groups)
    if not np.all(np.isfinite(grad_mean)):
        raise GrpoError("non-finite gradient")
    updated = policy.with_params(policy.get_params() + learning_rate * grad_mean)
    stats = {
        "objective": objective_sum / len(groups),
        "mean_reward": reward_sum / len(groups),
        "kl": policy_kl(updated, ref),
    }
    return updated, stats


def grpo_step(groups, policy: ToyPolicy, ref: ToyPolicy, config: GrpoConfig,
              learning_rate: float) -> ToyPolicy:
    """One gradient-ascent step on the objective over a batch of groups."""
    updated, _ = training_step(groups, policy, ref, config, learning_rate)
    return updated


def sample_group(policy: ToyPolicy, question_id: str, reward_fn, config: GrpoConfig,
                 rng: np.random.Generator, length: int | None = None) -> RolloutGroup:
    """Sample G rollouts from the policy and score their decoded text."""
    rollouts = [policy.sample(rng, length) for _ in range(config.group_size)]
    rewards = [reward_fn(policy.decode(tokens)) for tokens in rollouts]
    return make_rollout_group(question_id, policy, rollouts, rewards)
