"""Cycle-consistency quality checks for a registered section series.

Boxes on section ``t`` travel t -> t+1 -> t+2 along the two adjacent
registrations and return to ``t`` through the inverse of the interleave
registration. A well-registered cycle lands every box back on itself; the
median IoU over a section's boxes is compared against ``q``.

Each triplet cycle involves two adjacent pairs, so the first and last pair
of a series are covered by one cycle only. To localise failures there,
attribution also uses *bridge* cycles t -> t+1 -> t+3 -> t+2 -> t (adjacent,
interleave, inverse adjacent, inverse interleave), which involve adjacent
pairs t and t+2 but not t+1. Bridge cycles only inform which pairs are
blamed; they never change the per-cycle flags or the series class.
"""
from __future__ import annotations

import enum
import logging
import math
from itertools import combinations
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BBox, ConvexPolygon, iou_box, iou_polygon, box_to_polygon
from .transform import Direction, PairTransform

log = logging.getLogger(__name__)

DEFAULT_Q = 0.1
CALIBRATION_SHIFT = 70.0


class InconsistentTriplet(ValueError):
    pass


@dataclass(frozen=True)
class CycleTriplet:
    f_t: PairTransform
    f_t1: PairTransform
    b_t: PairTransform

    def __post_init__(self):
        if not (self.f_t.target == self.f_t1.source and self.b_t.source == self.f_t.source
                and self.b_t.target == self.f_t1.target):
            raise InconsistentTriplet(
                f"transforms {self.f_t.pair}, {self.f_t1.pair}, {self.b_t.pair} do not form a cycle")

    @property
    def t(self) -> int:
        return self.f_t.source

    @property
    def pairs(self) -> tuple[int, int]:
        return (self.t, self.t + 1)

    def legs(self):
        return [(self.f_t, Direction.FORWARD), (self.f_t1, Direction.FORWARD), (self.b_t, Direction.INVERSE)]


@dataclass(frozen=True)
class BridgeCycle:
    """t -> t+1 (adjacent), t+1 -> t+3 (interleave), back to t+2 and t through inverses."""
    f_t: PairTransform
    b_t1: PairTransform
    f_t2: PairTransform
    b_t: PairTransform

    def __post_init__(self):
        t = self.f_t.source
        want = [(t, t + 1), (t + 1, t + 3), (t + 2, t + 3), (t, t + 2)]
        got = [self.f_t.pair, self.b_t1.pair, self.f_t2.pair, self.b_t.pair]
        if got != want:
            raise InconsistentTriplet(f"transforms {got} do not form a bridge cycle")

    @property
    def t(self) -> int:
        return self.f_t.source

    @property
    def pairs(self) -> tuple[int, int]:
        return (self.t, self.t + 2)

    def legs(self):
        return [(self.f_t, Direction.FORWARD), (self.b_t1, Direction.FORWARD),
                (self.f_t2, Direction.INVERSE), (self.b_t, Direction.INVERSE)]


@dataclass
class CycleReport:
    t: int
    median_iou: float
    fc: int
    per_box_iou: list[float] = field(default_factory=list)
    indeterminate: bool = False


class QualityClass(str, enum.Enum):
    GOOD = "Good"
    ACCEPTABLE = "Acceptable"
    BAD = "Bad"


@dataclass
class SeriesQuality:
    quality: QualityClass
    fc_flags: list[int]
    failing_runs: list[int]


def cycle_map_points(tr, points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    for leg, direction in tr.legs():
        p = leg.map_points(p, direction)
    return p


def cycle_map_box(tr, b: BBox) -> ConvexPolygon:
    return ConvexPolygon.hull(cycle_map_points(tr, b.corners()))


def lower_median(values: Sequence[float]) -> float:
    """Median that picks the lower middle element for even counts."""
    s = sorted(values)
    return float(s[(len(s) - 1) // 2])


def fc_score(boxes_t: Sequence[BBox], tr, q: float = DEFAULT_Q) -> CycleReport:
    """Per-box cycle IoU, its lower median, and the failure flag (median < q).

    A section without boxes cannot be scored; it is reported with ``fc=1``
    and ``indeterminate=True``.
    """
    if not boxes_t:
        return CycleReport(tr.t, math.nan, 1, [], indeterminate=True)
    ious = []
    for b in boxes_t:
        try:
            mapped = cycle_map_box(tr, b)
        except ValueError:
            # corners collapsed under a broken map
            ious.append(0.0)
            continue
        ious.append(iou_polygon(box_to_polygon(b), mapped))
    med = lower_median(ious)
    return CycleReport(tr.t, med, int(med < q), ious)


def _min_cover(sets: list[frozenset], limit: int = 16) -> set[int]:
    """Smallest set of pairs hitting every set; ties go to the lowest indices.

    Solved per connected component. Components with more than ``limit``
    candidates are not searched and every candidate is flagged.
    """
    chosen: set[int] = set()
    remaining = list(sets)
    while remaining:
        comp_sets = [remaining.pop(0)]
        comp = set(comp_sets[0])
        grew = True
        while grew:
            grew = False
            for s in list(remaining):
                if s & comp:
                    comp |= s
                    comp_sets.append(s)
                    remaining.remove(s)
                    grew = True
        cands = sorted(comp)
        if len(cands) > limit:
            chosen |= comp
            continue
        for size in range(1, len(cands) + 1):
            hit = next((set(c) for c in combinations(cands, size)
                        if all(s & set(c) for s in comp_sets)), None)
            if hit is not None:
                chosen |= hit
                break
    return chosen


def attribute_pairs(reports: Sequence[CycleReport], n_sections: int,
                    bridges: Sequence[CycleReport] = ()) -> list[int]:
    """Turn per-cycle flags into per-adjacent-pair flags.

    Triplet cycle ``t`` involves adjacent pairs t and t+1; bridge cycle ``t``
    involves pairs t and t+2. A pair taking part in any passing determinate
    cycle is cleared. Among the remaining pairs, the smallest set that
    explains every failed cycle is flagged (ties: lowest indices). A failed
    triplet left unexplained (only its interleave leg can be wrong) falls back
    to flagging pair ``t``. Indeterminate cycles carry no vote.
    """
    n_pairs = n_sections - 1
    checks = [((r.t, r.t + 1), bool(r.fc)) for r in reports if not r.indeterminate]
    checks += [((r.t, r.t + 2), bool(r.fc)) for r in bridges if not r.indeterminate]
    cleared = {k for ks, failed in checks if not failed for k in ks}
    suspects = {frozenset(k for k in ks if k not in cleared and k < n_pairs) for ks, failed in checks if failed}
    flagged = _min_cover(sorted((s for s in suspects if s), key=sorted))
    flags = [int(k in flagged) for k in range(n_pairs)]
    for r in reports:
        if r.indeterminate or not r.fc:
            continue
        if not (flags[r.t] or (r.t + 1 < n_pairs and flags[r.t + 1])):
            flags[r.t] = 1
    return flags


def run_lengths(flags: Sequence[int]) -> list[int]:
    runs, cur = [], 0
    for f in flags:
        if f:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


def classify_series(fc_flags: Sequence[int]) -> SeriesQuality:
    """Good: no failures. Bad: any run of two or more consecutive failed pairs.
    Acceptable: only isolated failures, each of which the interleave path can skip."""
    if not fc_flags:
        raise ValueError("classify_series needs at least one flag")
    flags = [int(bool(f)) for f in fc_flags]
    runs = run_lengths(flags)
    if not runs:
        quality = QualityClass.GOOD
    elif max(runs) >= 2:
        quality = QualityClass.BAD
    else:
        quality = QualityClass.ACCEPTABLE
    return SeriesQuality(quality, flags, runs)


def calibrate_q(boxes: Sequence[BBox], shift_magnitude: float = CALIBRATION_SHIFT,
                trials: int = 100, seed: int = 0) -> float:
    """Median IoU between boxes and copies shifted by ``shift_magnitude`` in random directions."""
    if not boxes:
        raise ValueError("calibrate_q needs at least one box")
    rng = np.random.default_rng(seed)
    ious = []
    for _ in range(trials):
        angles = rng.uniform(0.0, 2 * math.pi, size=len(boxes))
        for b, a in zip(boxes, angles):
            moved = b.translated(shift_magnitude * math.cos(a), shift_magnitude * math.sin(a))
            ious.append(iou_box(b, moved))
    return float(np.median(ious))


@dataclass
class SeriesQA:
    q: float
    cycles: list[CycleReport]
    pair_flags: list[int]
    quality: SeriesQuality
    bridges: list[CycleReport] = field(default_factory=list)

    def cycle_flags(self) -> dict[int, int]:
        return {c.t: c.fc for c in self.cycles}

    def to_json(self) -> dict:
        cycles = {c.t: c for c in self.cycles}
        pairs = []
        for k, flag in enumerate(self.pair_flags):
            c = cycles.get(k)
            if c is None:
                # the last pair has no cycle of its own; report the one that covers it
                c = cycles.get(k - 1)
            pairs.append({
                "t": k,
                "median_iou": None if c is None or math.isnan(c.median_iou) else round(c.median_iou, 6),
                "fc": flag,
            })
        return {
            "q": self.q,
            "series_class": self.quality.quality.value,
            "pairs": pairs,
            "cycles": [
                {"t": c.t, "median_iou": None if math.isnan(c.median_iou) else round(c.median_iou, 6),
                 "fc": c.fc, "indeterminate": c.indeterminate, "n_boxes": len(c.per_box_iou)}
                for c in self.cycles
            ],
            "bridges": [
                {"t": c.t, "median_iou": None if math.isnan(c.median_iou) else round(c.median_iou, 6),
                 "fc": c.fc, "indeterminate": c.indeterminate}
                for c in self.bridges
            ],
            "failing_runs": self.quality.failing_runs,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SeriesQA":
        def rep(c):
            return CycleReport(c["t"], math.nan if c["median_iou"] is None else c["median_iou"],
                               c["fc"], [], c.get("indeterminate", False))

        flags = [p["fc"] for p in data["pairs"]]
        return cls(data["q"], [rep(c) for c in data.get("cycles", [])], flags, classify_series(flags),
                   [rep(c) for c in data.get("bridges", [])])


def assess_series(boxes_by_section: Sequence[Sequence[BBox]], adjacent: dict, interleave: dict,
                  q: float = DEFAULT_Q, executor=None) -> SeriesQA:
    """Score every complete cycle ``t = 0 .. T-3`` and classify the series."""
    n = len(boxes_by_section)
    if n < 3:
        raise ValueError("cycle QA needs at least three sections")
    missing = [(t, t + 1) for t in range(n - 1) if t not in adjacent]
    missing += [(t, t + 2) for t in range(n - 2) if t not in interleave]
    if missing:
        raise KeyError(f"missing transforms for pairs {missing}")

    def score(t):
        tr = CycleTriplet(adjacent[t], adjacent[t + 1], interleave[t])
        return fc_score(list(boxes_by_section[t]), tr, q)

    def score_bridge(t):
        br = BridgeCycle(adjacent[t], interleave[t + 1], adjacent[t + 2], interleave[t])
        return fc_score(list(boxes_by_section[t]), br, q)

    mapper = executor.map if executor is not None else map
    reports = list(mapper(score, range(n - 2)))
    bridges = list(mapper(score_bridge, range(n - 3)))
    flags = attribute_pairs(reports, n, bridges)
    for r in reports:
        if r.indeterminate:
            log.info("cycle %d has no boxes on section %d; left out of pair attribution", r.t, r.t)
    return SeriesQA(q, reports, flags, classify_series(flags), bridges)
