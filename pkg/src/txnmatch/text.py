"""Text normalization and string-similarity primitives.

Every component that looks at transaction text (data generation, tokenizers,
retrieval, the pipeline) goes through `normalize` so there is exactly one
definition of the canonical form.
"""

from __future__ import annotations

import re

# Lowercase alphanumerics, '*' (payment-aggregator marker), and spaces
# survive; every other character becomes a space before collapsing.
_NON_CANONICAL_RE = re.compile(r"[^a-z0-9* ]")
_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Canonicalize raw transaction or merchant text.

    normalize("ABC---123")          -> "abc 123"
    normalize("SQ *COFFEE  SHOP\\n") -> "sq *coffee shop"
    """
    lowered = text.lower()
    lowered = _WS_RE.sub(" ", lowered)
    cleaned = _NON_CANONICAL_RE.sub(" ", lowered)
    return _WS_RE.sub(" ", cleaned).strip()


def token_set(text: str) -> frozenset[str]:
    """Whitespace tokens of a normalized string."""
    return frozenset(text.split())


def char_trigrams(text: str) -> frozenset[str]:
    """Character trigrams of a normalized string (spaces included).

    Strings shorter than 3 characters contribute themselves as the sole
    member so short names still have a nonempty signature.
    """
    if len(text) < 3:
        return frozenset((text,)) if text else frozenset()
    return frozenset(text[i : i + 3] for i in range(len(text) - 2))


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    """Set Jaccard similarity; empty-vs-empty is defined as 0.0."""
    if not a and not b:
        return 0.0
    inter = len(a & b)
    if inter == 0:
        return 0.0
    return inter / (len(a) + len(b) - inter)


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):  # keep the inner loop over the longer string
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            curr[j] = min(
                prev[j] + 1,
                curr[j - 1] + 1,
                prev[j - 1] + (ca != cb),
            )
        prev = curr
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    """Normalized edit-distance similarity: 1 - dist / max(len).

    Both strings empty -> 1.0 (identical).
    """
    if not a and not b:
        return 1.0
    longest = max(len(a), len(b))
    return 1.0 - levenshtein(a, b) / longest
