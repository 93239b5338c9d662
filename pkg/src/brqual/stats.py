"""Paired significance testing and inter-rater agreement.

Implemented from the definitions rather than wrapping a stats library so the
exact-p contract is pinned: the signed-rank test enumerates the null
distribution (via subset-sum counting) for n <= 25 and switches to the
tie-corrected normal approximation with continuity correction above that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

from .errors import LengthMismatch, TooFewPairs

EXACT_CUTOFF = 25

EMPTY_CATEGORY = "(empty)"

MAGNITUDE_NEGLIGIBLE = "negligible"
MAGNITUDE_SMALL = "small"
MAGNITUDE_MEDIUM = "medium"
MAGNITUDE_LARGE = "large"

# |delta| bands from the effect-size reference the magnitude labels come from
_DELTA_BANDS = ((0.147, MAGNITUDE_NEGLIGIBLE), (0.33, MAGNITUDE_SMALL),
                (0.474, MAGNITUDE_MEDIUM))


def _average_ranks(values: Sequence[float]) -> list[float]:
    """Ranks 1..n of `values` ascending, ties sharing their average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0  # ranks are 1-based
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks: list[int], w_plus_doubled: int) -> float:
    """Two-sided exact p over all 2^n equally likely sign assignments.

    Counts assignments in both tails around the null mean. Doubling the
    ranks makes every value an integer (tied average ranks are multiples
    of 0.5), so the subset-sum table is exact.
    """
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total, r - 1, -1):
            if counts[s - r]:
                counts[s] += counts[s - r]
    lo = min(w_plus_doubled, total - w_plus_doubled)
    hi = max(w_plus_doubled, total - w_plus_doubled)
    tail = sum(counts[: lo + 1]) + sum(counts[hi:])
    return min(1.0, tail / (1 << len(doubled_ranks)))


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float]) -> dict[str, float]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; ties get average ranks. Returns
    {"w_statistic", "p_value", "n"} where the statistic is min(W+, W-).

    Raises:
        LengthMismatch: input lengths differ.
        TooFewPairs: fewer than 5 non-zero differences remain.
    """
    if len(paired_a) != len(paired_b):
        raise LengthMismatch(f"paired inputs differ: {len(paired_a)} vs {len(paired_b)}")
    diffs = [a - b for a, b in zip(paired_a, paired_b) if a != b]
    n = len(diffs)
    if n < 5:
        raise TooFewPairs(f"only {n} non-zero differences; need at least 5")

    abs_diffs = [abs(d) for d in diffs]
    ranks = _average_ranks(abs_diffs)
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)
    w_minus = sum(r for r, d in zip(ranks, diffs) if d < 0)
    w_stat = min(w_plus, w_minus)

    if n <= EXACT_CUTOFF:
        doubled = [int(round(2 * r)) for r in ranks]
        p = _exact_two_sided_p(doubled, int(round(2 * w_plus)))
    else:
        mu = n * (n + 1) / 4.0
        tie_counts: dict[float, int] = {}
        for d in abs_diffs:
            tie_counts[d] = tie_counts.get(d, 0) + 1
        tie_term = sum(t ** 3 - t for t in tie_counts.values()) / 48.0
        sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        d = w_plus - mu
        if d > 0:
            z = (d - 0.5) / sigma
        elif d < 0:
            z = (d + 0.5) / sigma
        else:
            z = 0.0
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return {"w_statistic": w_stat, "p_value": p, "n": float(n)}


def cliffs_delta(group_a: Sequence[float], group_b: Sequence[float]) -> dict[str, Any]:
    """Cliff's delta over all cross pairs, with its magnitude band.

    delta = (#{a > b} - #{a < b}) / (|A| * |B|)
    """
    if not group_a or not group_b:
        raise ValueError("both groups must be non-empty")
    gt = lt = 0
    for a in group_a:
        for b in group_b:
            if a > b:
                gt += 1
            elif a < b:
                lt += 1
    delta = (gt - lt) / (len(group_a) * len(group_b))
    return {"delta": delta, "magnitude": delta_magnitude(delta)}


def delta_magnitude(delta: float) -> str:
    for bound, label in _DELTA_BANDS:
        if abs(delta) < bound:
            return label
    return MAGNITUDE_LARGE


def bonferroni(alpha: float, tests: int) -> float:
    """Corrected per-test alpha: alpha / tests."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if tests < 1:
        raise ValueError("tests must be positive")
    return alpha / tests


@dataclass(frozen=True)
class KappaResult:
    label_type: str | None
    kappa: float
    observed_agreement: float
    categories: tuple[str, ...]
    confusion: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "label_type": self.label_type,
            "kappa": self.kappa,
            "observed_agreement": self.observed_agreement,
            "categories": list(self.categories),
            "confusion": [list(row) for row in self.confusion],
        }


def cohens_kappa(labels_a: Sequence[str | None], labels_b: Sequence[str | None],
                 categories: Sequence[str] | None = None,
                 label_type: str | None = None) -> KappaResult:
    """Cohen's kappa between two annotators over categorical labels.

    Empty labels (None or "") are mapped to an explicit "(empty)" category
    before tabulation, so shared empties count as valid concordances.
    Perfect observed agreement yields kappa = 1 by convention.
    """
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"label lists differ: {len(labels_a)} vs {len(labels_b)}")
    if not labels_a:
        raise ValueError("label lists must be non-empty")

    norm_a = [lab if lab else EMPTY_CATEGORY for lab in labels_a]
    norm_b = [lab if lab else EMPTY_CATEGORY for lab in labels_b]
    if categories is None:
        cats = sorted(set(norm_a) | set(norm_b))
    else:
        cats = list(categories)
        if EMPTY_CATEGORY not in cats and (EMPTY_CATEGORY in norm_a or EMPTY_CATEGORY in norm_b):
            cats.append(EMPTY_CATEGORY)
    index = {c: i for i, c in enumerate(cats)}
    k = len(cats)
    matrix = [[0] * k for _ in range(k)]
    for a, b in zip(norm_a, norm_b):
        matrix[index[a]][index[b]] += 1

    total = len(norm_a)
    p_o = sum(matrix[i][i] for i in range(k)) / total
    row = [sum(matrix[i]) for i in range(k)]
    col = [sum(matrix[i][j] for i in range(k)) for j in range(k)]
    p_e = sum(row[i] * col[i] for i in range(k)) / (total * total)

    if p_o >= 1.0:
        kappa = 1.0
    elif p_e >= 1.0:
        kappa = 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return KappaResult(label_type=label_type, kappa=kappa, observed_agreement=p_o,
                       categories=tuple(cats),
                       confusion=tuple(tuple(r) for r in matrix))
