"""Rule-based answer corruption for building tiered quality evaluation sets.

Tier H keeps correct answers verbatim, tier M applies a same-category
perturbation, tier L replaces the answer across categories (or negates a
yes/no). Rules are chosen uniformly among those applicable to the item.
"""

from __future__ import annotations

import numpy as np

from .corpus import QaItem

COLORS = ("blue", "brown", "cyan", "gray", "green", "purple", "red", "yellow")
SIZES = ("large", "small")
YESNO_DEFINITE = ("yes", "no")
YESNO_UNCERTAIN = ("maybe", "cannot tell")
MATERIALS = ("metal", "rubber")
SHAPES = ("cube", "cylinder", "sphere")

# Fixed hue-neighbour table over the scene vocabulary's eight colors.
SIMILAR_COLORS = {
    "gray": ("brown", "blue"),
    "brown": ("gray", "red"),
    "red": ("brown", "purple"),
    "purple": ("red", "blue"),
    "blue": ("purple", "cyan"),
    "cyan": ("blue", "green"),
    "green": ("cyan", "yellow"),
    "yellow": ("green", "brown"),
}
SIMILAR_SHAPES = {
    "cube": ("sphere", "cylinder"),
    "sphere": ("cylinder", "cube"),
    "cylinder": ("cube", "sphere"),
}

# Attribute words that do not exist in the scene vocabulary at all.
NONEXISTENT_ATTRIBUTES = ("Triangle.", "Plastic.")

TIER_ORDINALS = {"H": 5.0, "M": 3.0, "L": 1.0}


class InjectionError(Exception):
    pass


class UnclassifiableAnswerError(InjectionError):
    pass


def _normalize(answer: str) -> str:
    return answer.strip().rstrip(".").strip().lower()


def _format(token: str) -> str:
    return token[0].upper() + token[1:] + "."


def classify_answer(answer: str) -> str:
    """Lexicon-based category of an answer token."""
    token = _normalize(answer)
    if token.isdigit():
        return "number"
    if token in COLORS:
        return "color"
    if token in SIZES:
        return "size"
    if token in YESNO_DEFINITE or token in YESNO_UNCERTAIN:
        return "yesno"
    if token in MATERIALS:
        return "material"
    if token in SHAPES:
        return "shape"
    raise UnclassifiableAnswerError(f"cannot classify answer {answer!r}")


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def inject_medium(item: QaItem, rng: np.random.Generator) -> str:
    """Same-category perturbation; the output always differs from the input."""
    token = _normalize(item.answer)
    category = classify_answer(item.answer)
    if category == "number":
        value = int(token)
        deltas = [d for d in (-2, -1, 1, 2) if value + d >= 0]
        return _format(str(value + _pick(rng, deltas)))
    if category == "color":
        return _format(_pick(rng, SIMILAR_COLORS[token]))
    if category == "size":
        return _format("small" if token == "large" else "large")
    if category == "yesno":
        if token in YESNO_DEFINITE:
            return _format(_pick(rng, YESNO_UNCERTAIN))
        return _format("cannot tell" if token == "maybe" else "maybe")
    if category == "material":
        return _format("rubber" if token == "metal" else "metal")
    return _format(_pick(rng, SIMILAR_SHAPES[token]))


def _wrong_category_token(rng: np.random.Generator, pools) -> str:
    pool = pools[int(rng.integers(len(pools)))]
    if pool == "number":
        return _format(str(int(rng.integers(0, 11))))
    if pool == "nonexistent":
        return _pick(rng, NONEXISTENT_ATTRIBUTES)
    options = {"color": COLORS, "shape": SHAPES, "material": MATERIALS}[pool]
    return _format(_pick(rng, options))


def inject_low(item: QaItem, rng: np.random.Generator) -> str:
    """Cross-category replacement, or negation for definite yes/no answers."""
    token = _normalize(item.answer)
    category = classify_answer(item.answer)
    if category == "yesno" and token in YESNO_DEFINITE:
        return _format("no" if token == "yes" else "yes")
    if category == "number":
        return _wrong_category_token(rng, ("color", "shape"))
    if category == "yesno":
        return _wrong_category_token(rng, ("color", "number", "material"))
    if category == "color":
        return _wrong_category_token(rng, ("material", "shape", "number", "nonexistent"))
    if category == "size":
        return _wrong_category_token(rng, ("color", "material", "number", "nonexistent"))
    if category == "material":
        return _wrong_category_token(rng, ("color", "shape", "number", "nonexistent"))
    return _wrong_category_token(rng, ("color", "material", "number", "nonexistent"))


def build_tiered_set(items, counts: tuple[int, int, int], seed: int) -> list[QaItem]:
    """Shuffle items with the seed and split them into verbatim/medium/low tiers.

    Each selected item gets its own derived RNG so per-item results do not
    depend on processing order. The original answer category is kept as the
    question's ground-truth category.
    """
    h, m, low = counts
    needed = h + m + low
    items = list(items)
    if len(items) < needed:
        raise InjectionError(f"need at least {needed} items, got {len(items)}")
    order = np.random.default_rng(seed).permutation(len(items))[:needed]
    out = []
    for j, idx in enumerate(order):
        src = items[int(idx)]
        rng = np.random.default_rng([seed, j])
        if j < h:
            answer, tier = src.answer, "H"
        elif j < h + m:
            answer, tier = inject_medium(src, rng), "M"
        else:
            answer, tier = inject_low(src, rng), "L"
        out.append(QaItem(question=src.question, answer=answer,
                          answer_category=src.answer_category, tier=tier))
    return out


def tier_ordinal(tier: str) -> float:
    return TIER_ORDINALS[tier]


_QUESTION_TEMPLATES = {
    "number": "How many {adj} objects are in the scene?",
    "color": "What color is the {adj} object?",
    "size": "What size is the {adj} object?",
    "yesno": "Is there a {adj} object behind the sphere?",
    "material": "What material is the {adj} object?",
    "shape": "What shape is the {adj} object?",
}
_ADJECTIVES = ("large", "small", "shiny", "matte", "partially hidden", "leftmost", "rightmost")


def synthesize_qa_items(n: int, seed: int) -> list[QaItem]:
    """Deterministic correct-answer QA items cycling through all categories."""
    rng = np.random.default_rng(seed)
    categories = list(_QUESTION_TEMPLATES)
    items = []
    for i in range(n):
        category = categories[i % len(categories)]
        adj = _pick(rng, _ADJECTIVES)
        question = _QUESTION_TEMPLATES[category].format(adj=adj)
        if category == "number":
            answer = _format(str(int(rng.integers(0, 11))))
        elif category == "color":
            answer = _format(_pick(rng, COLORS))
        elif category == "size":
            answer = _format(_pick(rng, SIZES))
        elif category == "yesno":
            answer = _format(_pick(rng, YESNO_DEFINITE))
        elif category == "material":
            answer = _format(_pick(rng, MATERIALS))
        else:
            answer = _format(_pick(rng, SHAPES))
        items.append(QaItem(question=f"{question} ({i})", answer=answer,
                            answer_category=category, tier="H"))
    return items
