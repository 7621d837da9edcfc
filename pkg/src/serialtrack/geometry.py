"""Planar shapes and overlap measures.

Boxes are axis-aligned ``(x_min, y_min, x_max, y_max)``; polygons are convex and
stored counter-clockwise; circles carry a center and radius. ``iou`` dispatches
on the shape pair so association code does not have to care which
representation a detection uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MERGE_EPS = 1e-9


class GeometryError(ValueError):
    """Raised when a shape violates its construction invariants."""


class Point2D(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {vals}")

    @classmethod
    def from_xywh(cls, left, top, width, height) -> "BBox":
        return cls(left, top, left + width, top + height)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point2D:
        return Point2D(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def corners(self) -> np.ndarray:
        """Corners as a (4, 2) array, counter-clockwise from the min corner."""
        return np.array([
            [self.x_min, self.y_min],
            [self.x_max, self.y_min],
            [self.x_max, self.y_max],
            [self.x_min, self.y_max],
        ], dtype=float)

    def translated(self, dx, dy) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class Circle:
    center: Point2D
    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.center[0]) and math.isfinite(self.center[1])):
            raise GeometryError(f"non-finite circle center {self.center}")
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise GeometryError(f"circle radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", Point2D(float(self.center[0]), float(self.center[1])))

    @property
    def area(self) -> float:
        return math.pi * self.radius ** 2

    def bbox(self) -> BBox:
        cx, cy = self.center
        r = self.radius
        return BBox(cx - r, cy - r, cx + r, cy + r)


class ConvexPolygon:
    """Strictly convex, counter-clockwise polygon.

    Use :meth:`hull` to build one from an arbitrary point cloud; the plain
    constructor expects vertices that already form a convex polygon in either
    orientation and normalises them.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        pts = _clean_ring(np.asarray(vertices, dtype=float).reshape(-1, 2))
        if len(pts) < 3:
            raise GeometryError("polygon needs at least 3 non-colinear vertices")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("non-finite polygon vertex")
        if _signed_area(pts) < 0:
            pts = pts[::-1].copy()
        if not _is_convex_ccw(pts):
            raise GeometryError("vertices do not form a convex polygon; use ConvexPolygon.hull")
        pts.setflags(write=False)
        self.vertices = pts

    @classmethod
    def hull(cls, points) -> "ConvexPolygon":
        return cls(convex_hull(points))

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    def bounds(self) -> BBox:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return BBox(lo[0], lo[1], hi[0], hi[1])

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"ConvexPolygon({self.vertices.tolist()!r})"


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _clean_ring(pts: np.ndarray) -> np.ndarray:
    """Drop repeated vertices (within MERGE_EPS) and colinear middles."""
    out = []
    for p in pts:
        if not out or np.max(np.abs(p - out[-1])) > MERGE_EPS:
            out.append(p)
    while len(out) > 1 and np.max(np.abs(out[0] - out[-1])) <= MERGE_EPS:
        out.pop()
    changed = True
    while changed and len(out) >= 3:
        changed = False
        n = len(out)
        for i in range(n):
            a, b, c = out[i - 1], out[i], out[(i + 1) % n]
            scale = max(1.0, float(np.max(np.abs(c - a))))
            if abs(_cross(a, b, c)) <= MERGE_EPS * scale:
                del out[i]
                changed = True
                break
    return np.array(out, dtype=float).reshape(-1, 2)


def _is_convex_ccw(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        if _cross(pts[i - 1], pts[i], pts[(i + 1) % n]) < 0:
            return False
    return True


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise convex hull (Andrew's monotone chain), colinear points dropped."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    uniq = sorted({(float(x), float(y)) for x, y in pts})
    if len(uniq) < 3:
        return np.array(uniq, dtype=float).reshape(-1, 2)
    lower: list = []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def box_to_polygon(b: BBox) -> ConvexPolygon:
    return ConvexPolygon(b.corners())


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` against every edge of convex ``clip``.

    Both rings must be counter-clockwise. Returns the (possibly empty) clipped ring.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        # signed distance (scaled) of each vertex to the clip edge; >= 0 is inside
        side = [ex * (p[1] - a[1]) - ey * (p[0] - a[0]) for p in inputs]
        m = len(inputs)
        for j in range(m):
            cur, prev = inputs[j], inputs[j - 1]
            s_cur, s_prev = side[j], side[j - 1]
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_edge_cross(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_edge_cross(prev, cur, s_prev, s_cur))
    return np.array(output, dtype=float).reshape(-1, 2)


def _edge_cross(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_intersection_area(a: ConvexPolygon, b: ConvexPolygon) -> float:
    la, lb = a.bounds(), b.bounds()
    if la.x_max <= lb.x_min or lb.x_max <= la.x_min or la.y_max <= lb.y_min or lb.y_max <= la.y_min:
        return 0.0
    ring = clip_convex(a.vertices, b.vertices)
    if len(ring) < 3:
        return 0.0
    area = _signed_area(ring)
    return min(max(area, 0.0), a.area, b.area)


def iou_box(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_polygon(a: ConvexPolygon, b: ConvexPolygon) -> float:
    inter = polygon_intersection_area(a, b)
    if inter <= 0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def circle_intersection_area(a: Circle, b: Circle) -> float:
    """Exact lens area of two overlapping discs."""
    d = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    r1, r2 = a.radius, b.radius
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    c1 = (d * d + r1 * r1 - r2 * r2) / (2 * d * r1)
    c2 = (d * d + r2 * r2 - r1 * r1) / (2 * d * r2)
    alpha = math.acos(max(-1.0, min(1.0, c1)))
    beta = math.acos(max(-1.0, min(1.0, c2)))
    return (r1 * r1 * (alpha - math.sin(2 * alpha) / 2)
            + r2 * r2 * (beta - math.sin(2 * beta) / 2))


def iou_circle(a: Circle, b: Circle) -> float:
    inter = circle_intersection_area(a, b)
    if inter <= 0:
        return 0.0
    return min(1.0, inter / (a.area + b.area - inter))


def as_polygon(shape) -> ConvexPolygon:
    if isinstance(shape, ConvexPolygon):
        return shape
    if isinstance(shape, BBox):
        return box_to_polygon(shape)
    raise TypeError(f"cannot convert {type(shape).__name__} to a polygon")


def iou(a, b) -> float:
    """IoU between any two supported shapes (boxes and polygons mix freely)."""
    if isinstance(a, BBox) and isinstance(b, BBox):
        return iou_box(a, b)
    if isinstance(a, Circle) and isinstance(b, Circle):
        return iou_circle(a, b)
    if isinstance(a, Circle) or isinstance(b, Circle):
        raise TypeError("circles can only be compared with circles")
    return iou_polygon(as_polygon(a), as_polygon(b))
