"""Record types and JSONL persistence for the curation pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

SCORE_MIN = 0.0
SCORE_MAX = 5.0
WEIGHT_SUM_TOL = 1e-9

SELECTED_SOURCES = ("original", "expert_1", "expert_2", "expert_3")
ANSWER_CATEGORIES = ("number", "color", "size", "yesno", "material", "shape")
TIERS = ("H", "M", "L")


class CorpusError(Exception):
    """Base class for corpus I/O and validation failures."""


class CorpusParseError(CorpusError):
    """A JSONL line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason


class RecordValidationError(CorpusError):
    """One or more record invariants are violated."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass
class Sample:
    """One corpus row: image reference, question, original answer, domain."""

    id: str
    image_ref: str
    question: str
    answer: str
    domain: str
    source: str
    latent_truth: float | None = None


@dataclass
class VisionPrior:
    """Structured perception evidence (object tags + OCR strings) for one image."""

    tags: list[str] = field(default_factory=list)
    ocr: list[str] = field(default_factory=list)


@dataclass
class CritiqueRecord:
    """One expert's verdict on a sample: scalar score plus structured rationale."""

    sample_id: str
    expert_id: str
    score: float
    rationale: str


@dataclass
class FusedLabel:
    """Consensus score for a sample and the per-domain weights that produced it.

    ``weights_used`` maps expert_id -> domain -> normalized weight.
    """

    sample_id: str
    fused_score: float
    fused_z: float
    weights_used: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class RefinedEntry:
    """Final refined-dataset row: selected answer plus confidence and rationale."""

    sample_id: str
    question: str
    selected_answer: str
    confidence: float
    merged_rationale: str
    selected_source: str


@dataclass
class CandidatePool:
    """Original answer plus rewrites competing for selection, with rescored values."""

    sample_id: str
    candidates: list[str]
    rescored: list[float] | None = None


@dataclass
class QaItem:
    """One QA pair of the tiered evaluation set; category refers to the correct answer."""

    question: str
    answer: str
    answer_category: str
    tier: str = "H"


@dataclass
class RolloutRecord:
    """One critic rollout: text plus (optionally) its reward and target score."""

    question_id: str
    text: str
    reward: float | None = None
    fused_score: float | None = None


RECORD_KINDS = {
    "sample": Sample,
    "critique": CritiqueRecord,
    "fused_label": FusedLabel,
    "refined_entry": RefinedEntry,
    "candidate_pool": CandidatePool,
    "qa_item": QaItem,
    "rollout": RolloutRecord,
}
_KIND_BY_TYPE = {cls: kind for kind, cls in RECORD_KINDS.items()}


def _in_score_range(value) -> bool:
    return isinstance(value, (int, float)) and SCORE_MIN <= value <= SCORE_MAX


def _string_list_violations(name: str, values) -> list[str]:
    out = []
    if not isinstance(values, list):
        return [f"{name} must be a list"]
    for i, v in enumerate(values):
        if not isinstance(v, str) or v == "":
            out.append(f"{name}[{i}] must be a non-empty string")
    return out


def validate_record(record) -> list[str]:
    """Return every violated invariant of ``record`` (empty list means valid)."""
    v: list[str] = []
    if isinstance(record, Sample):
        if not record.id:
            v.append("id must be non-empty")
        if not record.domain:
            v.append("domain must be non-empty")
        if record.latent_truth is not None and not _in_score_range(record.latent_truth):
            v.append("latent_truth out of [0,5]")
    elif isinstance(record, VisionPrior):
        v.extend(_string_list_violations("tags", record.tags))
        v.extend(_string_list_violations("ocr", record.ocr))
    elif isinstance(record, CritiqueRecord):
        if not record.sample_id:
            v.append("sample_id must be non-empty")
        if not record.expert_id:
            v.append("expert_id must be non-empty")
        if not _in_score_range(record.score):
            v.append("score out of [0,5]")
    elif isinstance(record, FusedLabel):
        if not record.sample_id:
            v.append("sample_id must be non-empty")
        if not _in_score_range(record.fused_score):
            v.append("fused_score out of [0,5]")
        domains: dict[str, float] = {}
        for expert, per_domain in record.weights_used.items():
            for domain, w in per_domain.items():
                domains[domain] = domains.get(domain, 0.0) + w
        for domain, total in domains.items():
            if abs(total - 1.0) > WEIGHT_SUM_TOL:
                v.append(f"weights_used for domain {domain!r} sum to {total}, expected 1")
    elif isinstance(record, RefinedEntry):
        if not record.sample_id:
            v.append("sample_id must be non-empty")
        if not _in_score_range(record.confidence):
            v.append("confidence out of [0,5]")
        if record.selected_source not in SELECTED_SOURCES:
            v.append(f"selected_source must be one of {SELECTED_SOURCES}")
    elif isinstance(record, CandidatePool):
        if not record.sample_id:
            v.append("sample_id must be non-empty")
        if not record.candidates:
            v.append("candidates must be non-empty")
        if record.rescored is not None and len(record.rescored) != len(record.candidates):
            v.append("rescored length must match candidates length")
    elif isinstance(record, QaItem):
        if not record.answer:
            v.append("answer must be non-empty")
        if record.answer_category not in ANSWER_CATEGORIES:
            v.append(f"answer_category must be one of {ANSWER_CATEGORIES}")
        if record.tier not in TIERS:
            v.append(f"tier must be one of {TIERS}")
    elif isinstance(record, RolloutRecord):
        if not record.question_id:
            v.append("question_id must be non-empty")
        if record.fused_score is not None and not _in_score_range(record.fused_score):
            v.append("fused_score out of [0,5]")
    else:
        v.append(f"unknown record type {type(record).__name__}")
    return v


def record_to_dict(record) -> dict:
    """Serialize a record to a JSON-ready dict with a leading ``kind`` discriminator."""
    kind = _KIND_BY_TYPE.get(type(record))
    if kind is None:
        raise RecordValidationError(f"unknown record type {type(record).__name__}")
    out: dict = {"kind": kind}
    for f in fields(record):
        value = getattr(record, f.name)
        if value is None:
            continue
        out[f.name] = value
    return out


def record_from_dict(data: dict, kind: str):
    cls = RECORD_KINDS.get(kind)
    if cls is None:
        raise RecordValidationError(f"unknown record kind {kind!r}")
    if "kind" in data and data["kind"] != kind:
        raise RecordValidationError(
            f"record kind {data['kind']!r} does not match requested {kind!r}"
        )
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known - {"kind"}
    if unknown:
        raise RecordValidationError(f"unexpected fields {sorted(unknown)} for kind {kind!r}")
    try:
        record = cls(**{k: v for k, v in data.items() if k in known})
    except TypeError as exc:
        raise RecordValidationError(f"missing or invalid fields for kind {kind!r}: {exc}")
    return record


def save_corpus(records: Iterable, path) -> None:
    """Write records as JSONL, one object per line, deterministic key order."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            violations = validate_record(record)
            if violations:
                raise RecordValidationError(
                    f"invalid record {record!r}: {'; '.join(violations)}", violations
                )
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False))
            fh.write("\n")


def load_corpus(path, kind: str) -> list:
    """Load and validate a JSONL corpus of the named record kind.

    Raises CorpusParseError with the offending line number on malformed JSON and
    RecordValidationError naming the violated field otherwise.
    """
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, line_no, f"malformed JSON: {exc.msg}")
            if not isinstance(data, dict):
                raise CorpusParseError(path, line_no, "line is not a JSON object")
            try:
                record = record_from_dict(data, kind)
            except RecordValidationError as exc:
                raise RecordValidationError(f"{path}:{line_no}: {exc}", exc.violations)
            violations = validate_record(record)
            if violations:
                raise RecordValidationError(
                    f"{path}:{line_no}: {'; '.join(violations)}", violations
                )
            records.append(record)
    if kind == "sample":
        seen: set[str] = set()
        for record in records:
            if record.id in seen:
                raise RecordValidationError(f"duplicate sample id {record.id!r} in {path}")
            seen.add(record.id)
    return records


def save_priors(priors: dict[str, VisionPrior], path) -> None:
    """Write a sample_id -> VisionPrior map as JSONL."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for sample_id, prior in priors.items():
            violations = validate_record(prior)
            if violations:
                raise RecordValidationError(
                    f"invalid prior for {sample_id!r}: {'; '.join(violations)}", violations
                )
            fh.write(
                json.dumps(
                    {"sample_id": sample_id, "tags": prior.tags, "ocr": prior.ocr},
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def load_priors(path) -> dict[str, VisionPrior]:
    """Load a JSONL file of {sample_id, tags, ocr} lines keyed by sample_id."""
    path = Path(path)
    priors: dict[str, VisionPrior] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, line_no, f"malformed JSON: {exc.msg}")
            sample_id = data.get("sample_id")
            if not sample_id:
                raise RecordValidationError(f"{path}:{line_no}: sample_id must be non-empty")
            if sample_id in priors:
                raise RecordValidationError(f"{path}:{line_no}: duplicate sample_id {sample_id!r}")
            prior = VisionPrior(tags=data.get("tags", []), ocr=data.get("ocr", []))
            violations = validate_record(prior)
            if violations:
                raise RecordValidationError(
                    f"{path}:{line_no}: {'; '.join(violations)}", violations
                )
            priors[sample_id] = prior
    return priors
