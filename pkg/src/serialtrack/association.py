"""Dual-path association of detections across serial sections.

Detections on section ``t+1`` inherit track IDs from section ``t`` through the
adjacent registration; those left unmatched get a second chance against
section ``t-1`` through the interleave registration, which recovers objects
missing on one section. When the pair ``(t, t+1)`` failed QA, section ``t+2``
is linked straight from ``t`` and section ``t+1`` is skipped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, Circle, ConvexPolygon, box_to_polygon, iou_circle, iou_polygon
from .mot_metrics import FrameSet, MotRecord, hungarian
from .transform import Direction, PairTransform, map_box, map_circle

log = logging.getLogger(__name__)

DEFAULT_S = 0.1


class MissingTransform(KeyError):
    pass


class InconsistentStack(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    section: int
    shape: BBox | Circle
    score: float | None = None
    track_id: int | None = None
    bbox: BBox | None = None  # original box when ``shape`` is a derived circle

    def __post_init__(self):
        if self.section < 0:
            raise ValueError("section index must be >= 0")
        if self.track_id is not None and self.track_id < 1:
            raise ValueError("track ids are positive integers")

    @property
    def box(self) -> BBox:
        if self.bbox is not None:
            return self.bbox
        return self.shape.bbox() if isinstance(self.shape, Circle) else self.shape


@dataclass(frozen=True)
class Link:
    track_id: int
    early: tuple[int, int]  # (section, index)
    late: tuple[int, int]
    iou: float
    path: str  # "adjacent", "second", or "skip"


@dataclass
class TrackSet:
    tracks: dict[int, list[Detection]] = field(default_factory=dict)
    links: list[Link] = field(default_factory=list)

    def __len__(self):
        return len(self.tracks)

    def detections(self) -> list[Detection]:
        return [d for tid in sorted(self.tracks) for d in self.tracks[tid]]

    def lengths(self) -> dict[int, int]:
        return {tid: len(v) for tid, v in self.tracks.items()}


# ---------------------------------------------------------------------------
# affinity and matching

def _mapped_late_shapes(dets_late, tr: PairTransform):
    out = []
    for d in dets_late:
        if isinstance(d.shape, Circle):
            out.append(map_circle(tr, d.shape, Direction.INVERSE))
        else:
            try:
                out.append(map_box(tr, d.shape, Direction.INVERSE))
            except ValueError:
                out.append(None)
    return out


def _bounds(shape) -> tuple[float, float, float, float]:
    if isinstance(shape, Circle):
        b = shape.bbox()
    elif isinstance(shape, ConvexPolygon):
        b = shape.bounds()
    else:
        b = shape
    return (b.x_min, b.y_min, b.x_max, b.y_max)


def pair_affinity(dets_early: Sequence[Detection], dets_late: Sequence[Detection],
                  tr: PairTransform) -> np.ndarray:
    """IoU of every early detection against every late detection pulled back by ``tr``.

    ``tr`` maps the early section into the late one, so late shapes are
    carried into the early space with its inverse.
    """
    aff = np.zeros((len(dets_early), len(dets_late)))
    if not len(dets_early) or not len(dets_late):
        return aff
    mapped = _mapped_late_shapes(dets_late, tr)
    eb = np.array([_bounds(d.shape) for d in dets_early])
    for j, shape in enumerate(mapped):
        if shape is None:
            continue
        x0, y0, x1, y1 = _bounds(shape)
        hit = (eb[:, 0] < x1) & (eb[:, 2] > x0) & (eb[:, 1] < y1) & (eb[:, 3] > y0)
        for i in np.nonzero(hit)[0]:
            early = dets_early[i].shape
            if isinstance(shape, Circle):
                aff[i, j] = iou_circle(early, shape)
            else:
                aff[i, j] = iou_polygon(box_to_polygon(early), shape)
    return aff


def greedy_match(aff, s: float = DEFAULT_S) -> list[tuple[int, int]]:
    """Take the largest remaining IoU above ``s`` until none is left.

    Ties are broken by (row, col) so the result is fully determined.
    """
    a = np.asarray(aff, dtype=float)
    rows, cols = np.nonzero(a > s)
    order = sorted(zip(-a[rows, cols], rows.tolist(), cols.tolist()))
    used_r, used_c = set(), set()
    matches = []
    for _, r, c in order:
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        matches.append((r, c))
    return matches


def optimal_match(aff, s: float = DEFAULT_S) -> list[tuple[int, int]]:
    """Maximum total-IoU matching restricted to pairs above ``s`` (ablation only)."""
    a = np.asarray(aff, dtype=float)
    if a.size == 0:
        return []
    w = np.where(a > s, a, 0.0)
    return [(r, c) for r, c in hungarian(-w) if a[r, c] > s]


MATCHERS = {"greedy": greedy_match, "hungarian": optimal_match}


# ---------------------------------------------------------------------------
# dual-path association

class _Tracker:
    def __init__(self, stack, s, matcher):
        self.stack = stack
        self.ids: list[list[int | None]] = [[None] * len(sec) for sec in stack]
        self.s = s
        self.match = MATCHERS[matcher]
        self.next_id = 1
        self.links: list[Link] = []

    def fresh(self, section: int):
        for k, tid in enumerate(self.ids[section]):
            if tid is None:
                self.ids[section][k] = self.next_id
                self.next_id += 1

    def link(self, early: int, late: int, tr: PairTransform, path: str, candidates=None):
        """Match still-unassigned detections on ``late`` from ``early``."""
        late_idx = [k for k, tid in enumerate(self.ids[late]) if tid is None]
        early_idx = list(range(len(self.stack[early]))) if candidates is None else candidates
        taken = {tid for tid in self.ids[late] if tid is not None}
        early_idx = [k for k in early_idx if self.ids[early][k] not in taken]
        if not late_idx or not early_idx:
            return
        aff = pair_affinity([self.stack[early][k] for k in early_idx],
                            [self.stack[late][k] for k in late_idx], tr)
        for r, c in self.match(aff, self.s):
            i, j = early_idx[r], late_idx[c]
            tid = self.ids[early][i]
            self.ids[late][j] = tid
            self.links.append(Link(tid, (early, i), (late, j), float(aff[r, c]), path))


def _validate_stack(stack):
    for t, sec in enumerate(stack):
        for d in sec:
            if d.section != t:
                raise InconsistentStack(f"detection on section {d.section} listed under section {t}")


def _need(transforms: Mapping[int, PairTransform], t: int, what: str) -> PairTransform:
    try:
        return transforms[t]
    except KeyError:
        raise MissingTransform(f"no {what} transform for section {t}") from None


def dpa_track(stack: Sequence[Sequence[Detection]], adjacent: Mapping[int, PairTransform],
              interleave: Mapping[int, PairTransform], fc: Sequence[int] | None = None,
              s: float = DEFAULT_S, cycle_fc: Mapping[int, int] | None = None,
              matcher: str = "greedy") -> TrackSet:
    """Assign global track IDs across an ordered section stack.

    ``adjacent[t]`` maps section t to t+1 and ``interleave[t]`` maps t to t+2.
    ``fc[t]`` flags the adjacent pair (t, t+1) as failed. ``cycle_fc[t]``
    (optional) flags the cycle whose interleave leg is ``interleave[t]``; the
    second path is not taken through a flagged cycle.
    """
    if not 0 < s < 1:
        raise ValueError("s must be in (0, 1)")
    _validate_stack(stack)
    n = len(stack)
    fc = list(fc) if fc is not None else [0] * max(n - 1, 0)
    if len(fc) < n - 1:
        raise InconsistentStack(f"{len(fc)} pair flags for {n} sections")
    cycle_fc = cycle_fc or {}
    trk = _Tracker(stack, s, matcher)
    if n == 0:
        return TrackSet()
    trk.fresh(0)
    t = 0
    while t < n - 1:
        if not fc[t] or t + 2 >= n:
            if fc[t]:
                log.info("pair (%d, %d) failed and no section %d to skip to", t, t + 1, t + 2)
                trk.fresh(t + 1)
                t += 1
                continue
            trk.link(t, t + 1, _need(adjacent, t, "adjacent"), "adjacent")
            if t >= 1 and (t - 1) in interleave and not cycle_fc.get(t - 1, 0):
                # only tracks that ended at t-1 are candidates for the bridge
                carried = {tid for tid in trk.ids[t]}
                cand = [k for k, tid in enumerate(trk.ids[t - 1]) if tid not in carried]
                trk.link(t - 1, t + 1, interleave[t - 1], "second", candidates=cand)
            elif t >= 1:
                log.debug("second path into section %d skipped", t + 1)
            trk.fresh(t + 1)
            t += 1
        else:
            trk.link(t, t + 2, _need(interleave, t, "interleave"), "skip")
            trk.fresh(t + 2)
            trk.fresh(t + 1)
            t += 2

    tracks: dict[int, list[Detection]] = {}
    for sec, dets in enumerate(stack):
        for k, d in enumerate(dets):
            tid = trk.ids[sec][k]
            tracks.setdefault(tid, []).append(replace(d, track_id=tid))
    ordered = {tid: sorted(v, key=lambda d: d.section) for tid, v in sorted(tracks.items())}
    return TrackSet(ordered, trk.links)


def tracks_to_mot(ts: TrackSet) -> list[MotRecord]:
    """One MOT15 record per detection, frame = section + 1, sorted by frame then id."""
    recs = []
    for tid, dets in ts.tracks.items():
        for d in dets:
            b = d.box
            conf = 1.0 if d.score is None else d.score
            recs.append(MotRecord(d.section + 1, tid, b.x_min, b.y_min, b.width, b.height, conf))
    recs.sort(key=lambda r: (r.frame, r.id))
    return recs


def mot_to_trackset(fs: FrameSet) -> TrackSet:
    tracks: dict[int, list[Detection]] = {}
    for r in fs.records():
        conf = r.conf
        tracks.setdefault(r.id, []).append(Detection(r.frame - 1, r.box, conf, r.id))
    return TrackSet({tid: sorted(v, key=lambda d: d.section) for tid, v in sorted(tracks.items())})


def detections_from_mot(fs: FrameSet, n_sections: int | None = None,
                        shape_mode: str = "box") -> list[list[Detection]]:
    """Per-section detection lists from MOT15 records (IDs are dropped)."""
    n = n_sections if n_sections is not None else fs.last_frame
    stack: list[list[Detection]] = [[] for _ in range(n)]
    for r in fs.records():
        sec = r.frame - 1
        if sec >= n:
            raise InconsistentStack(f"detection on frame {r.frame} beyond {n} sections")
        box = r.box
        if shape_mode == "circle":
            stack[sec].append(Detection(sec, box_to_circle(box), r.conf, bbox=box))
        else:
            stack[sec].append(Detection(sec, box, r.conf))
    return stack


def box_to_circle(b: BBox) -> Circle:
    """Circle centered on the box, diameter = mean side length."""
    return Circle(b.center, 0.25 * (b.width + b.height))
