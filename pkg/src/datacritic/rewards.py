"""Reward functions for critic rollouts: score accuracy plus output format."""

from __future__ import annotations

import re
from dataclasses import dataclass

MARKER_QUESTION_ANALYSIS = "<Question Analysis>"
MARKER_EVALUATION_REASONS = "<Evaluation Reasons>"
MARKER_SCORING = "<Scoring>"
SCORING_CLOSE = "</Scoring>"

MARKERS = (MARKER_QUESTION_ANALYSIS, MARKER_EVALUATION_REASONS, MARKER_SCORING)
MARKER_NAMES = {
    MARKER_QUESTION_ANALYSIS: "QuestionAnalysis",
    MARKER_EVALUATION_REASONS: "EvaluationReasons",
    MARKER_SCORING: "Scoring",
}

_SCORING_SPAN = re.compile(re.escape(MARKER_SCORING) + r"(.*?)" + re.escape(SCORING_CLOSE),
                           re.DOTALL)
_INTEGER = re.compile(r"-?\d+")


@dataclass
class CriticOutput:
    """A rollout's text, its extracted integer score, and which markers it carries."""

    text: str
    parsed_score: int | None
    markers_present: frozenset[str]


def extract_score(text: str) -> int | None:
    """First integer in [0,5] inside the <Scoring>...</Scoring> span, else None."""
    match = _SCORING_SPAN.search(text)
    if match is None:
        return None
    for token in _INTEGER.finditer(match.group(1)):
        value = int(token.group())
        if 0 <= value <= 5:
            return value
    return None


def parse_critic_output(text: str) -> CriticOutput:
    present = frozenset(MARKER_NAMES[m] for m in MARKERS if m in text)
    return CriticOutput(text=text, parsed_score=extract_score(text), markers_present=present)


def accuracy_reward(parsed: int | None, fused: float) -> float:
    """max(0, 1 - |parsed - fused| / 5); a missing parsed score earns 0."""
    if not 0 <= fused <= 5:
        raise ValueError(f"fused score {fused} out of [0,5]")
    if parsed is None:
        return 0.0
    return max(0.0, 1.0 - abs(parsed - fused) / 5.0)


def format_reward(text: str) -> float:
    """0.5 * (markers present / 3); each marker counts at most once."""
    n = sum(1 for marker in MARKERS if marker in text)
    return 0.5 * n / 3.0


def total_reward(text: str, fused: float) -> float:
    """Accuracy plus format reward; range [0, 1.5]."""
    return accuracy_reward(extract_score(text), fused) + format_reward(text)
