"""MOTChallenge 2015 evaluation: file format, CLEAR-MOT and identity metrics."""
from __future__ import annotations

import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .geometry import BBox, iou_box

DEFAULT_MATCH_IOU = 0.5
TABLE_COLUMNS = ("IDF1", "IDP", "IDR", "Rcll", "Prcn", "FAR", "GT", "MT", "PT", "ML",
                 "FP", "FN", "IDs", "FM", "MOTA", "MOTP", "MOTAL")


class MalformedLine(ValueError):
    def __init__(self, lineno: int, reason: str):
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"line {lineno}: {reason}")


class NonPositiveSize(MalformedLine):
    pass


class FrameMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# MOT15 records

@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = 1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    @property
    def box(self) -> BBox:
        return BBox.from_xywh(self.left, self.top, self.width, self.height)


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def format_record(r: MotRecord) -> str:
    return ",".join([str(r.frame), str(r.id)] + [_fmt(v) for v in
                    (r.left, r.top, r.width, r.height, r.conf, r.x, r.y, r.z)])


def _parse_int(tok: str, lineno: int, name: str) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise MalformedLine(lineno, f"{name} is not a number: {tok!r}") from None
    if not v.is_integer():
        raise MalformedLine(lineno, f"{name} must be an integer: {tok!r}")
    return int(v)


def parse_line(line: str, lineno: int = 1) -> MotRecord:
    toks = [t.strip() for t in line.strip().split(",")]
    if not 6 <= len(toks) <= 10:
        raise MalformedLine(lineno, f"expected 6 to 10 fields, got {len(toks)}")
    frame = _parse_int(toks[0], lineno, "frame")
    tid = _parse_int(toks[1], lineno, "id")
    if frame < 1:
        raise MalformedLine(lineno, f"frame must be >= 1, got {frame}")
    vals = []
    for name, tok in zip(("bb_left", "bb_top", "bb_width", "bb_height", "conf", "x", "y", "z"), toks[2:]):
        try:
            v = float(tok)
        except ValueError:
            raise MalformedLine(lineno, f"{name} is not a number: {tok!r}") from None
        if not math.isfinite(v):
            raise MalformedLine(lineno, f"{name} is not finite: {tok!r}")
        vals.append(v)
    if vals[2] <= 0 or vals[3] <= 0:
        raise NonPositiveSize(lineno, f"box width/height must be positive, got {vals[2]}x{vals[3]}")
    defaults = [1.0, -1.0, -1.0, -1.0]
    vals += defaults[len(vals) - 4:]
    return MotRecord(frame, tid, *vals)


class FrameSet:
    """MOT15 records grouped by frame (1-based)."""

    def __init__(self, records: Iterable[MotRecord] = (), check_ids: bool = True):
        self.frames: dict[int, list[MotRecord]] = defaultdict(list)
        self.check_ids = check_ids
        for r in records:
            self.add(r)

    def add(self, r: MotRecord):
        bucket = self.frames[r.frame]
        if self.check_ids and r.id >= 0 and any(o.id == r.id for o in bucket):
            raise ValueError(f"duplicate id {r.id} in frame {r.frame}")
        bucket.append(r)

    def records(self) -> list[MotRecord]:
        return [r for f in sorted(self.frames) for r in self.frames[f]]

    def __len__(self):
        return sum(len(v) for v in self.frames.values())

    @property
    def last_frame(self) -> int:
        return max((f for f, v in self.frames.items() if v), default=0)

    def ids(self) -> set[int]:
        return {r.id for v in self.frames.values() for r in v}

    def get(self, frame: int) -> list[MotRecord]:
        return self.frames.get(frame, [])


def parse_mot15(stream: TextIO | str | Iterable[str], check_ids: bool = True) -> FrameSet:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    fs = FrameSet(check_ids=check_ids)
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        rec = parse_line(line, lineno)
        try:
            fs.add(rec)
        except ValueError as exc:
            raise MalformedLine(lineno, str(exc)) from None
    return fs


def write_mot15(fs: FrameSet | Iterable[MotRecord], stream: TextIO | None = None) -> str:
    records = fs.records() if isinstance(fs, FrameSet) else list(fs)
    text = "".join(format_record(r) + "\n" for r in records)
    if stream is not None:
        stream.write(text)
    return text


def read_mot15(path, check_ids: bool = True) -> FrameSet:
    with open(path, newline="") as fh:
        return parse_mot15(fh, check_ids=check_ids)


# ---------------------------------------------------------------------------
# assignment

def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of min(rows, cols) pairs.

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns ``(row, col)`` pairs sorted by row.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=float)
    return float(sum(c[r, k] for r, k in pairs))


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MotScore:
    idf1: float = 0.0
    idp: float = 0.0
    idr: float = 0.0
    rcll: float = 0.0
    prcn: float = 0.0
    far: float = 0.0
    gt: int = 0
    mt: int = 0
    pt: int = 0
    ml: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    fm: int = 0
    mota: float = 0.0
    motp: float = 0.0
    motal: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "IDF1": self.idf1, "IDP": self.idp, "IDR": self.idr, "Rcll": self.rcll,
            "Prcn": self.prcn, "FAR": self.far, "GT": self.gt, "MT": self.mt, "PT": self.pt,
            "ML": self.ml, "FP": self.fp, "FN": self.fn, "IDs": self.ids, "FM": self.fm,
            "MOTA": self.mota, "MOTP": self.motp, "MOTAL": self.motal,
        }

    def to_json(self) -> dict:
        d = asdict(self)
        return d


def _iou_matrix(gts: list[MotRecord], hyps: list[MotRecord]) -> np.ndarray:
    out = np.zeros((len(gts), len(hyps)))
    for i, g in enumerate(gts):
        gb = g.box
        for j, h in enumerate(hyps):
            out[i, j] = iou_box(gb, h.box)
    return out


def _frame_range(gt: FrameSet, hyp: FrameSet) -> int:
    n = gt.last_frame
    if n == 0:
        raise FrameMismatch("ground truth has no boxes")
    if hyp.last_frame > n:
        raise FrameMismatch(f"hypothesis has frames up to {hyp.last_frame}, ground truth ends at {n}")
    return n


def clear_mot(gt: FrameSet, hyp: FrameSet, match_iou: float = DEFAULT_MATCH_IOU) -> MotScore:
    """CLEAR-MOT counts with correspondence persistence across frames.

    A GT object keeps its last matched hypothesis while their IoU stays at or
    above ``match_iou``; the remaining pairs are assigned by Hungarian on
    ``1 - IoU``. A new match whose hypothesis differs from the object's
    previous one counts as an ID switch.
    """
    n_frames = _frame_range(gt, hyp)
    last_match: dict[int, int] = {}
    fp = fn = ids = 0
    iou_sum = 0.0
    n_match = 0
    n_gt_boxes = 0
    gt_frames: dict[int, list[bool]] = defaultdict(list)

    for f in range(1, n_frames + 1):
        gts, hyps = gt.get(f), hyp.get(f)
        n_gt_boxes += len(gts)
        ious = _iou_matrix(gts, hyps)
        gid = [g.id for g in gts]
        hid = [h.id for h in hyps]
        h_index = {h: j for j, h in enumerate(hid)}
        matched: dict[int, int] = {}
        used_h: set[int] = set()
        for i, o in enumerate(gid):
            prev = last_match.get(o)
            if prev is not None and prev in h_index:
                j = h_index[prev]
                if j not in used_h and ious[i, j] >= match_iou:
                    matched[i] = j
                    used_h.add(j)
        rows = [i for i in range(len(gid)) if i not in matched]
        cols = [j for j in range(len(hid)) if j not in used_h]
        if rows and cols:
            sub = ious[np.ix_(rows, cols)]
            cost = np.where(sub >= match_iou, 1.0 - sub, 2.0)
            for r, k in hungarian(cost):
                if sub[r, k] >= match_iou:
                    i, j = rows[r], cols[k]
                    o = gid[i]
                    if o in last_match and last_match[o] != hid[j]:
                        ids += 1
                    matched[i] = j
                    used_h.add(j)
        for i, j in matched.items():
            last_match[gid[i]] = hid[j]
            iou_sum += ious[i, j]
        n_match += len(matched)
        fn += len(gid) - len(matched)
        fp += len(hid) - len(matched)
        for i, o in enumerate(gid):
            gt_frames[o].append(i in matched)

    mt = pt = ml = fm = 0
    for o, tracked in gt_frames.items():
        ratio = sum(tracked) / len(tracked)
        if ratio >= 0.8:
            mt += 1
        elif ratio <= 0.2:
            ml += 1
        else:
            pt += 1
        segments = sum(1 for k, t in enumerate(tracked) if t and (k == 0 or not tracked[k - 1]))
        fm += max(segments - 1, 0)

    score = MotScore()
    score.gt = len(gt_frames)
    score.mt, score.pt, score.ml = mt, pt, ml
    score.fp, score.fn, score.ids, score.fm = fp, fn, ids, fm
    score.rcll = 100.0 * n_match / n_gt_boxes
    score.prcn = 100.0 * n_match / (n_match + fp) if n_match + fp else 0.0
    score.far = fp / n_frames
    score.mota = 100.0 * (1.0 - (fp + fn + ids) / n_gt_boxes)
    score.motp = 100.0 * iou_sum / n_match if n_match else 0.0
    score.motal = 100.0 * (1.0 - (fp + fn + math.log10(ids + 1)) / n_gt_boxes)
    score.extra = {"frames": n_frames, "gt_boxes": n_gt_boxes, "matches": n_match}
    return score


@dataclass
class IdMetrics:
    idf1: float
    idp: float
    idr: float
    idtp: int
    idfp: int
    idfn: int


def identity_overlap(gt: FrameSet, hyp: FrameSet, match_iou: float = DEFAULT_MATCH_IOU):
    """Per-identity detection counts and the GT x hypothesis co-occurrence matrix.

    ``overlap[i, j]`` counts frames where GT identity ``i`` and hypothesis
    identity ``j`` are both present with IoU >= ``match_iou``.
    """
    n_frames = _frame_range(gt, hyp)
    gt_ids = sorted(gt.ids())
    hyp_ids = sorted(hyp.ids())
    gi = {o: k for k, o in enumerate(gt_ids)}
    hi = {h: k for k, h in enumerate(hyp_ids)}
    overlap = np.zeros((len(gt_ids), len(hyp_ids)), dtype=np.int64)
    n_gt = np.zeros(len(gt_ids), dtype=np.int64)
    n_hyp = np.zeros(len(hyp_ids), dtype=np.int64)
    for f in range(1, n_frames + 1):
        gts, hyps = gt.get(f), hyp.get(f)
        for g in gts:
            n_gt[gi[g.id]] += 1
        for h in hyps:
            n_hyp[hi[h.id]] += 1
        if gts and hyps:
            ious = _iou_matrix(gts, hyps)
            for a, b in zip(*np.nonzero(ious >= match_iou)):
                overlap[gi[gts[a].id], hi[hyps[b].id]] += 1
    return gt_ids, hyp_ids, n_gt, n_hyp, overlap


def id_metrics(gt: FrameSet, hyp: FrameSet, match_iou: float = DEFAULT_MATCH_IOU) -> IdMetrics:
    """Identity precision/recall/F1 from a global one-to-one identity matching.

    Matching GT identity ``i`` to hypothesis ``j`` costs ``n_i + n_j - 2 m_ij``
    misassigned detections, so the optimal matching maximises total
    co-occurrence; that maximum is IDTP.
    """
    _, _, n_gt, n_hyp, overlap = identity_overlap(gt, hyp, match_iou)
    idtp = 0
    if overlap.size:
        pairs = hungarian(-overlap)
        idtp = int(sum(overlap[r, k] for r, k in pairs))
    idfn = int(n_gt.sum()) - idtp
    idfp = int(n_hyp.sum()) - idtp
    idp = 100.0 * idtp / (idtp + idfp) if idtp + idfp else 0.0
    idr = 100.0 * idtp / (idtp + idfn) if idtp + idfn else 0.0
    denom = 2 * idtp + idfp + idfn
    idf1 = 100.0 * 2 * idtp / denom if denom else 0.0
    return IdMetrics(idf1, idp, idr, idtp, idfp, idfn)


def evaluate(gt: FrameSet, hyp: FrameSet, match_iou: float = DEFAULT_MATCH_IOU) -> MotScore:
    score = clear_mot(gt, hyp, match_iou)
    im = id_metrics(gt, hyp, match_iou)
    score.idf1, score.idp, score.idr = im.idf1, im.idp, im.idr
    score.extra.update(idtp=im.idtp, idfp=im.idfp, idfn=im.idfn)
    return score


def format_table(rows: dict[str, MotScore] | MotScore, name_width: int = 12) -> str:
    """Aligned text table in the usual column order, percentages to one decimal."""
    if isinstance(rows, MotScore):
        rows = {"result": rows}
    name_width = max([name_width] + [len(k) for k in rows])
    widths = {c: max(len(c), 6) for c in TABLE_COLUMNS}
    lines = [" " * name_width + " " + " ".join(c.rjust(widths[c]) for c in TABLE_COLUMNS)]
    for name, s in rows.items():
        cells = []
        for c, v in s.row().items():
            if c == "FAR":
                txt = f"{v:.2f}"
            elif isinstance(v, (int, np.integer)):
                txt = str(int(v))
            else:
                txt = f"{v:.1f}"
            cells.append(txt.rjust(widths[c]))
        lines.append(name.ljust(name_width) + " " + " ".join(cells))
    return "\n".join(lines) + "\n"
