"""Small text helpers shared by several pipeline stages."""

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_WS_RE = re.compile(r"\s+")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric tokens, the tokenization used everywhere."""
    return _TOKEN_RE.findall(text.lower())


def collapse_ws(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return _WS_RE.sub(" ", text).strip()


def is_substantive(text: str, min_tokens: int = 3) -> bool:
    """A section counts as present iff it has at least `min_tokens` tokens."""
    return len(tokenize(text)) >= min_tokens


def token_overlap_ratio(candidate: str, source: str) -> float:
    """Fraction of candidate token occurrences that appear in the source.

    Used as the fuzzy-substring check: extracted section text must overlap
    the cleaned source at >= 0.9 to count as preserved content. An empty
    candidate trivially overlaps (ratio 1.0).
    """
    cand = tokenize(candidate)
    if not cand:
        return 1.0
    vocab = set(tokenize(source))
    hits = sum(1 for tok in cand if tok in vocab)
    return hits / len(cand)
