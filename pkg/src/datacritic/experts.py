"""Critic and rewriter backends: simulated experts plus a generic HTTP client.

Simulated backends are deterministic given (inputs, seed): every call derives
its RNG as numpy's PCG64 via ``default_rng([seed, sha256(call-identity)])``, so
results never depend on scheduling or call order.
"""

from __future__ import annotations

import hashlib
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from .corpus import CritiqueRecord, RecordValidationError, Sample, VisionPrior, validate_record
from .rewards import (
    MARKER_EVALUATION_REASONS,
    MARKER_QUESTION_ANALYSIS,
    MARKER_SCORING,
    SCORING_CLOSE,
)


class BackendError(Exception):
    """Base class for expert-backend failures."""


class BackendRequestError(BackendError):
    """Transport failure after exhausting retries."""


class MissingLatentError(BackendError):
    """A simulated backend needs a latent quality it cannot find."""


class RequestBatchError(BackendError):
    """One or more per-record failures in a fan-out batch."""

    def __init__(self, failures: list[tuple[str, str, Exception]]):
        lines = [f"({sid}, {eid}): {err}" for sid, eid, err in failures]
        super().__init__(f"{len(failures)} request(s) failed: " + "; ".join(lines[:5]))
        self.failures = failures


_QUALITY_TAG = re.compile(r"\(quality=([-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\)")


def embed_latent_quality(text: str, quality: float) -> str:
    """Append a machine-readable latent-quality tag to an answer."""
    return f"{text} (quality={quality:.6f})"


def extract_latent_quality(text: str) -> float | None:
    """Read the latent-quality tag out of an answer, if present."""
    match = _QUALITY_TAG.search(text)
    return float(match.group(1)) if match else None


def strip_latent_quality(text: str) -> str:
    return _QUALITY_TAG.sub("", text).strip()


def serialize_vision_prior(prior: VisionPrior) -> str:
    """Render a prior as the fixed two-line evidence wrapper."""
    tags = ", ".join(prior.tags) if prior.tags else "(none)"
    ocr = " | ".join(prior.ocr) if prior.ocr else "(none)"
    return f"Detected objects: {tags}\nDetected text: {ocr}"


DEFAULT_CRITIQUE_RUBRIC = (
    "You are grading the answer to a question about an image.\n"
    "{prior}\n"
    "Question: {question}\n"
    "Answer: {answer}\n"
    "Reply with a <Question Analysis> section, an <Evaluation Reasons> section, "
    "and an integer from 0 to 5 inside <Scoring></Scoring> tags."
)

DEFAULT_REWRITE_RUBRIC = (
    "Improve the answer to a question about an image.\n"
    "{prior}\n"
    "Question: {question}\n"
    "Original answer: {answer}\n"
    "Reviewer feedback: {rationale}\n"
    "Consensus quality of the original (0-5): {fused_score}\n"
    "Write a corrected answer only."
)


@dataclass
class PromptBundle:
    """Everything a backend needs to build one critique or rewrite prompt."""

    question: str
    answer: str
    serialized_prior: str
    rubric_id: str  # "critique" or "rewrite"
    rationale: str | None = None
    fused_score: float | None = None


def build_critique_bundle(sample: Sample, prior: VisionPrior) -> PromptBundle:
    return PromptBundle(
        question=sample.question,
        answer=sample.answer,
        serialized_prior=serialize_vision_prior(prior),
        rubric_id="critique",
    )


def build_rewrite_bundle(sample: Sample, rationale: str, fused_score: float,
                         prior: VisionPrior | None = None) -> PromptBundle:
    return PromptBundle(
        question=sample.question,
        answer=sample.answer,
        serialized_prior=serialize_vision_prior(prior or VisionPrior()),
        rubric_id="rewrite",
        rationale=rationale,
        fused_score=fused_score,
    )


def render_prompt(bundle: PromptBundle, template: str | None = None) -> str:
    if template is None:
        template = DEFAULT_CRITIQUE_RUBRIC if bundle.rubric_id == "critique" else DEFAULT_REWRITE_RUBRIC
    return template.format(
        prior=bundle.serialized_prior,
        question=bundle.question,
        answer=bundle.answer,
        rationale=bundle.rationale or "",
        fused_score="" if bundle.fused_score is None else f"{bundle.fused_score:.3f}",
    )


@dataclass
class SimulatedExpertParams:
    """Noise model of one simulated rater: per-domain std and bias plus a seed.

    The key "default" in either map acts as a fallback for unlisted domains.
    """

    noise_std: dict[str, float] = field(default_factory=dict)
    bias: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def sigma(self, domain: str) -> float:
        value = self.noise_std.get(domain, self.noise_std.get("default", 0.0))
        if value < 0:
            raise ValueError(f"noise std for domain {domain!r} must be >= 0")
        return value

    def offset(self, domain: str) -> float:
        return self.bias.get(domain, self.bias.get("default", 0.0))


def _derived_rng(seed: int, *parts: str) -> np.random.Generator:
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def _critique_rationale(expert_id: str, score: float, question: str) -> str:
    rounded = int(np.clip(round(score), 0, 5))
    return (
        f"{MARKER_QUESTION_ANALYSIS} {expert_id} reviewed the question: {question} "
        f"{MARKER_EVALUATION_REASONS} The answer deviates from the detected evidence "
        f"by an estimated margin. {MARKER_SCORING} {rounded} {SCORING_CLOSE}"
    )


class SimulatedExpert:
    """Rater whose scores are the sample's latent quality plus seeded Gaussian noise."""

    kind = "simulated"

    def __init__(self, expert_id: str, params: SimulatedExpertParams):
        self.expert_id = expert_id
        self.params = params

    def _latent(self, sample: Sample) -> float:
        tagged = extract_latent_quality(sample.answer)
        if tagged is not None:
            return tagged
        if sample.latent_truth is not None:
            return sample.latent_truth
        raise MissingLatentError(
            f"sample {sample.id!r} has no latent_truth and no quality tag in its answer"
        )

    def critique(self, sample: Sample, prior_text: str = "") -> CritiqueRecord:
        y = self._latent(sample)
        sigma = self.params.sigma(sample.domain)
        rng = _derived_rng(self.params.seed, "critique", self.expert_id, sample.id, sample.answer)
        noise = rng.normal(0.0, sigma) if sigma > 0 else 0.0
        score = float(np.clip(y + self.params.offset(sample.domain) + noise, 0.0, 5.0))
        return CritiqueRecord(
            sample_id=sample.id,
            expert_id=self.expert_id,
            score=score,
            rationale=_critique_rationale(self.expert_id, score, sample.question),
        )

    def rewrite(self, sample: Sample, rationale: str, fused_score: float,
                prior_text: str = "") -> str:
        y = self._latent(sample)
        sigma = self.params.sigma(sample.domain)
        rng = _derived_rng(self.params.seed, "rewrite", self.expert_id, sample.id, sample.answer)
        noise = rng.normal(0.0, sigma) if sigma > 0 else 0.0
        draw = float(np.clip(fused_score + self.params.offset(sample.domain) + noise, 0.0, 5.0))
        quality = max(y, draw)
        base = strip_latent_quality(sample.answer)
        return embed_latent_quality(f"Rewritten by {self.expert_id}: {base}", quality)


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.25
    deadline_s: float = 60.0


class HttpExpertBackend:
    """Client for a critique/rewrite HTTP service.

    POSTs JSON to {endpoint}/critique and {endpoint}/rewrite and expects
    {"score": number, "rationale": str} or {"answer": str}. Non-2xx responses
    and transport errors are retried with exponential backoff.
    """

    kind = "http"

    def __init__(self, expert_id: str, endpoint: str, retry: RetryPolicy | None = None,
                 headers: dict[str, str] | None = None, request_timeout_s: float = 30.0):
        self.expert_id = expert_id
        self.endpoint = endpoint.rstrip("/")
        self.retry = retry or RetryPolicy()
        self.headers = dict(headers or {})
        self.request_timeout_s = request_timeout_s

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.endpoint}/{path}"
        deadline = time.monotonic() + self.retry.deadline_s
        last_error: Exception | None = None
        for attempt in range(self.retry.max_attempts):
            if time.monotonic() > deadline:
                break
            try:
                response = requests.post(url, json=body, headers=self.headers,
                                         timeout=self.request_timeout_s)
                if 200 <= response.status_code < 300:
                    return response.json()
                last_error = BackendRequestError(
                    f"{url} returned HTTP {response.status_code}"
                )
            except requests.RequestException as exc:
                last_error = exc
            if attempt < self.retry.max_attempts - 1:
                time.sleep(min(self.retry.backoff_s * 2 ** attempt,
                               max(0.0, deadline - time.monotonic())))
        raise BackendRequestError(f"{url} failed after {self.retry.max_attempts} attempts: {last_error}")

    def critique(self, sample: Sample, prior_text: str = "") -> CritiqueRecord:
        body = {
            "sample_id": sample.id,
            "question": sample.question,
            "answer": sample.answer,
            "prior_text": prior_text,
            "rubric_id": "critique",
        }
        data = self._post("critique", body)
        score = data.get("score")
        if not isinstance(score, (int, float)) or not 0 <= score <= 5:
            raise RecordValidationError(
                f"backend {self.expert_id!r} returned score {score!r} out of [0,5] "
                f"for sample {sample.id!r}",
                ["score out of [0,5]"],
            )
        return CritiqueRecord(
            sample_id=sample.id,
            expert_id=self.expert_id,
            score=float(score),
            rationale=str(data.get("rationale", "")),
        )

    def rewrite(self, sample: Sample, rationale: str, fused_score: float,
                prior_text: str = "") -> str:
        body = {
            "sample_id": sample.id,
            "question": sample.question,
            "answer": sample.answer,
            "prior_text": prior_text,
            "rubric_id": "rewrite",
            "rationale": rationale,
            "fused_score": fused_score,
        }
        data = self._post("rewrite", body)
        answer = data.get("answer")
        if not isinstance(answer, str) or not answer:
            raise RecordValidationError(
                f"backend {self.expert_id!r} returned an empty rewrite for {sample.id!r}"
            )
        return answer


def _run_batch(tasks, worker, concurrency_limit: int, allow_partial: bool):
    """Fan a list of (key, callable) tasks out over a bounded thread pool."""
    results: dict = {}
    failures: list[tuple[str, str, Exception]] = []
    with ThreadPoolExecutor(max_workers=max(1, concurrency_limit)) as pool:
        futures = {key: pool.submit(worker, *args) for key, args in tasks}
        for key, future in futures.items():
            try:
                results[key] = future.result()
            except Exception as exc:  # noqa: BLE001 - collected per record
                failures.append((key[0], key[1], exc))
    if failures:
        for _, _, exc in failures:
            if isinstance(exc, RecordValidationError):
                raise exc
        if not allow_partial:
            raise RequestBatchError(sorted(failures, key=lambda f: (f[0], f[1])))
    return results


def request_critiques(samples, priors: dict[str, VisionPrior], backends,
                      concurrency_limit: int = 8, allow_partial: bool = False
                      ) -> list[CritiqueRecord]:
    """Collect one critique per (sample, expert), ordered by (sample_id, expert_id)."""
    if not backends:
        raise ValueError("expert roster must be non-empty")
    missing = [s.id for s in samples if s.id not in priors]
    if missing:
        raise ValueError(f"samples without a prior entry: {missing[:10]}")
    tasks = []
    for sample in samples:
        prior_text = serialize_vision_prior(priors[sample.id])
        for backend in backends:
            tasks.append(((sample.id, backend.expert_id),
                          (backend, sample, prior_text)))
    results = _run_batch(tasks, lambda b, s, p: b.critique(s, p),
                         concurrency_limit, allow_partial)
    records = []
    for key in sorted(results):
        record = results[key]
        violations = validate_record(record)
        if violations:
            raise RecordValidationError(
                f"critique for {key} invalid: {'; '.join(violations)}", violations
            )
        records.append(record)
    return records


def request_rewrites(samples, critiques, fused, backends,
                     concurrency_limit: int = 8, allow_partial: bool = False
                     ) -> dict[str, list[str]]:
    """One rewrite per expert per sample, keyed by sample_id in roster order."""
    if not backends:
        raise ValueError("expert roster must be non-empty")
    rationale_by_key = {(c.sample_id, c.expert_id): c.rationale for c in critiques}
    fused_by_id = {f.sample_id: f.fused_score for f in fused}
    tasks = []
    for sample in samples:
        if sample.id not in fused_by_id:
            raise ValueError(f"no fused label for sample {sample.id!r}")
        for backend in backends:
            key = (sample.id, backend.expert_id)
            if key not in rationale_by_key:
                raise ValueError(f"no critique for {key}")
            tasks.append((key, (backend, sample, rationale_by_key[key],
                                fused_by_id[sample.id])))
    results = _run_batch(tasks, lambda b, s, r, f: b.rewrite(s, r, f),
                         concurrency_limit, allow_partial)
    out: dict[str, list[str]] = {}
    for sample in samples:
        answers = []
        complete = True
        for backend in backends:
            key = (sample.id, backend.expert_id)
            if key not in results:
                complete = False
                break
            answers.append(results[key])
        if complete:
            out[sample.id] = answers
    return out
