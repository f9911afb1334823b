"""Partial orders and 1..L rating assignment.

Scores for one metric are sorted per perturbation, split into L near-equal
contiguous groups, and each model takes its group index as a rating.  Tied
raw scores always share a rating: a value straddling a split boundary goes
to the group holding the majority of its occurrences.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .metrics import RawScore


class RatingError(ValueError):
    pass


@dataclass(frozen=True)
class OrderedScore:
    model_id: str
    value: float


@dataclass(frozen=True)
class PartialOrder:
    """Models ordered ascending by raw score, ties by model id."""

    perturbation: str
    entries: tuple[OrderedScore, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise RatingError("partial order needs at least one entry")
        for a, b in zip(self.entries, self.entries[1:]):
            if (a.value, a.model_id) > (b.value, b.model_id):
                raise RatingError("entries not in ascending (value, model id) order")

    def values(self) -> list[float]:
        return [e.value for e in self.entries]


def create_partial_order(scores: Sequence[RawScore], perturbation: str) -> PartialOrder:
    picked = [s for s in scores if s.perturbation == perturbation]
    if not picked:
        raise RatingError(f"no scores for perturbation {perturbation!r}")
    seen = Counter(s.model_id for s in picked)
    dupes = [m for m, c in seen.items() if c > 1]
    if dupes:
        raise RatingError(f"duplicate model ids for {perturbation!r}: {sorted(dupes)}")
    ordered = sorted(picked, key=lambda s: (s.value, s.model_id))
    return PartialOrder(
        perturbation=perturbation,
        entries=tuple(OrderedScore(s.model_id, s.value) for s in ordered),
    )


def array_split(items: Sequence, levels: int) -> list[list]:
    """Contiguous near-equal split: the first N mod L groups get the extra
    element."""
    if levels < 1:
        raise RatingError("levels must be >= 1")
    return [list(chunk) for chunk in np.array_split(np.asarray(items, dtype=object), levels)]


def _majority_groups(values: list[float], levels: int) -> dict[float, int]:
    n = len(values)
    provisional = np.empty(n, dtype=int)
    start = 0
    for gi, chunk in enumerate(array_split(list(range(n)), levels)):
        provisional[start:start + len(chunk)] = gi
        start += len(chunk)
    out: dict[float, int] = {}
    i = 0
    while i < n:
        j = i
        while j < n and values[j] == values[i]:
            j += 1
        counts = Counter(provisional[i:j])
        # majority occurrence; ties between groups resolve to the lower index
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        out[values[i]] = int(best)
        i = j
    return out


def assign_rating(po: PartialOrder, levels: int) -> dict[str, int]:
    """Group index (1-based) per model after the tie-coherent split.

    A single model rates 1 on a perfect (zero) score and L otherwise.
    """
    if levels < 1:
        raise RatingError("levels must be >= 1")
    if len(po.entries) == 1:
        only = po.entries[0]
        return {only.model_id: 1 if only.value == 0 else levels}
    value_group = _majority_groups(po.values(), levels)
    return {e.model_id: value_group[e.value] + 1 for e in po.entries}


def _descending_rating(po: PartialOrder, levels: int) -> dict[str, int]:
    flipped = sorted(po.entries, key=lambda e: (-e.value, e.model_id))
    if len(flipped) == 1:
        only = flipped[0]
        return {only.model_id: 1 if only.value == 0 else levels}
    value_group = _majority_groups([e.value for e in flipped], levels)
    return {e.model_id: value_group[e.value] + 1 for e in flipped}


@dataclass(frozen=True)
class RatingTable:
    """Per-perturbation ratings for one metric.

    `ratings` is oriented so 1 means best for both directions; for
    higher-is-better metrics `ascending_ratings` additionally keeps the
    plain ascending-sort assignment (the orientation printed in reports
    that rank by raw value).
    """

    metric: str
    direction: str  # "lower" | "higher"
    orders: Mapping[str, PartialOrder]
    ratings: Mapping[str, Mapping[str, int]]
    ascending_ratings: Mapping[str, Mapping[str, int]]

    def __post_init__(self) -> None:
        if self.direction not in ("lower", "higher"):
            raise RatingError(f"bad direction {self.direction!r}")


def rate_metric(metric: str, scores: Sequence[RawScore], levels: int,
                direction: str = "lower") -> RatingTable:
    picked = [s for s in scores if s.metric == metric]
    if not picked:
        raise RatingError(f"no scores for metric {metric!r}")
    perturbations = sorted({s.perturbation for s in picked})
    orders: dict[str, PartialOrder] = {}
    best_first: dict[str, dict[str, int]] = {}
    ascending: dict[str, dict[str, int]] = {}
    for p in perturbations:
        po = create_partial_order(picked, p)
        orders[p] = po
        asc = assign_rating(po, levels)
        ascending[p] = asc
        if direction == "lower":
            best_first[p] = asc
        else:
            best_first[p] = _descending_rating(po, levels)
    return RatingTable(
        metric=metric,
        direction=direction,
        orders=orders,
        ratings=best_first,
        ascending_ratings=ascending,
    )
