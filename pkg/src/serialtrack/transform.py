"""Spatial maps between section coordinate spaces.

A :class:`PairTransform` carries points of section ``source`` into the space of
section ``target``: the affine stage is applied first, then the non-rigid
displacement field (``field(affine(p))``). The inverse runs the two stages
backwards, with the field inverted by fixed-point iteration.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np

from .geometry import BBox, Circle, ConvexPolygon, Point2D

DET_EPS = 1e-12
DEFAULT_INVERSE_TOL = 0.01
DEFAULT_INVERSE_MAX_ITER = 20


class SingularTransform(ValueError):
    pass


class NonConvergent(RuntimeError):
    def __init__(self, residual, message=None):
        self.residual = residual
        super().__init__(message or f"field inversion did not converge (max residual {residual:.4g})")


class Direction(str, enum.Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


class PairKind(str, enum.Enum):
    FORWARD_ADJACENT = "forward_adjacent"
    BACKWARD_INTERLEAVE = "backward_interleave"


def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=float)
    single = arr.ndim == 1
    return arr.reshape(-1, 2), single


def _restore(arr: np.ndarray, single: bool):
    if single:
        return Point2D(float(arr[0, 0]), float(arr[0, 1]))
    return arr


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape == (2, 3):
            m = np.vstack([m, [0.0, 0.0, 1.0]])
        if m.shape != (3, 3):
            raise ValueError(f"affine matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        if not np.allclose(m[2], [0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("last row of an affine matrix must be (0, 0, 1)")
        m[2] = (0.0, 0.0, 1.0)
        if abs(np.linalg.det(m[:2, :2])) <= DET_EPS:
            raise SingularTransform(f"affine is not invertible (det={np.linalg.det(m[:2, :2]):.3g})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty) -> "AffineTransform2D":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    @classmethod
    def similarity(cls, scale=1.0, angle_deg=0.0, tx=0.0, ty=0.0, center=(0.0, 0.0)) -> "AffineTransform2D":
        """Rotation by ``angle_deg`` and scaling about ``center``, then translation."""
        a = math.radians(angle_deg)
        c, s = scale * math.cos(a), scale * math.sin(a)
        cx, cy = center
        lin = np.array([[c, -s], [s, c]])
        off = np.array([cx, cy]) - lin @ np.array([cx, cy]) + np.array([tx, ty])
        return cls([[c, -s, off[0]], [s, c, off[1]], [0, 0, 1]])

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:2, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:2, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def scale_factor(self) -> float:
        """Isotropic scale, sqrt(|det|); used to carry circle radii."""
        return math.sqrt(abs(self.det))

    def apply(self, points):
        pts, single = _as_points(points)
        out = pts @ self.linear.T + self.offset
        return _restore(out, single)

    def inverse(self) -> "AffineTransform2D":
        lin = self.linear
        if abs(np.linalg.det(lin)) <= DET_EPS:
            raise SingularTransform("affine is not invertible")
        inv = np.linalg.inv(lin)
        m = np.eye(3)
        m[:2, :2] = inv
        m[:2, 2] = -inv @ self.offset
        return AffineTransform2D(m)

    def __matmul__(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """``(self @ other)`` applies ``other`` first, then ``self``."""
        return AffineTransform2D(self.matrix @ other.matrix)

    def __eq__(self, other):
        return isinstance(other, AffineTransform2D) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        return f"AffineTransform2D({self.matrix[:2].tolist()!r})"


def apply_affine(t: AffineTransform2D, p):
    return t.apply(p)


def invert_affine(t: AffineTransform2D) -> AffineTransform2D:
    return t.inverse()


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Displacements sampled on a regular grid, bilinearly interpolated.

    ``dx`` and ``dy`` have shape ``(height, width)``: row ``j`` is
    ``y = origin.y + j * spacing`` and column ``i`` is ``x = origin.x + i * spacing``.
    Queries outside the grid are clamped to the nearest edge.
    """

    origin: Point2D
    spacing: float
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=float)
        dy = np.array(self.dy, dtype=float)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError("dx and dy must be 2D arrays of equal shape")
        if dx.shape[0] < 2 or dx.shape[1] < 2:
            raise ValueError("displacement grid needs at least 2x2 nodes")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("displacement field has non-finite values")
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError("grid spacing must be positive")
        dx.setflags(write=False)
        dy.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "origin", Point2D(float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def zeros(cls, origin, spacing, width, height) -> "DisplacementField":
        z = np.zeros((height, width))
        return cls(origin, spacing, z, z)

    @classmethod
    def from_function(cls, origin, spacing, width, height, fn) -> "DisplacementField":
        """Sample ``fn(points) -> (n, 2) displacements`` at the grid nodes."""
        grid = grid_points(origin, spacing, width, height)
        d = np.asarray(fn(grid), dtype=float).reshape(-1, 2)
        return cls(origin, spacing, d[:, 0].reshape(height, width), d[:, 1].reshape(height, width))

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.width - 1) * self.spacing, y0 + (self.height - 1) * self.spacing)

    def nodes(self) -> np.ndarray:
        return grid_points(self.origin, self.spacing, self.width, self.height)

    def same_grid(self, other: "DisplacementField") -> bool:
        return (self.origin == other.origin and self.spacing == other.spacing
                and self.dx.shape == other.dx.shape)

    def displacement(self, points) -> np.ndarray:
        pts, _ = _as_points(points)
        gx = (pts[:, 0] - self.origin[0]) / self.spacing
        gy = (pts[:, 1] - self.origin[1]) / self.spacing
        gx = np.clip(gx, 0.0, self.width - 1)
        gy = np.clip(gy, 0.0, self.height - 1)
        i0 = np.minimum(np.floor(gx).astype(int), self.width - 2)
        j0 = np.minimum(np.floor(gy).astype(int), self.height - 2)
        fx = gx - i0
        fy = gy - j0
        out = np.empty_like(pts)
        for k, comp in enumerate((self.dx, self.dy)):
            c00 = comp[j0, i0]
            c10 = comp[j0, i0 + 1]
            c01 = comp[j0 + 1, i0]
            c11 = comp[j0 + 1, i0 + 1]
            out[:, k] = ((1 - fx) * (1 - fy) * c00 + fx * (1 - fy) * c10
                         + (1 - fx) * fy * c01 + fx * fy * c11)
        return out

    def apply(self, points):
        pts, single = _as_points(points)
        return _restore(pts + self.displacement(pts), single)

    def max_abs(self) -> float:
        return float(max(np.abs(self.dx).max(), np.abs(self.dy).max()))

    def is_zero(self) -> bool:
        return not (np.any(self.dx) or np.any(self.dy))

    def __eq__(self, other):
        return (isinstance(other, DisplacementField) and self.same_grid(other)
                and np.array_equal(self.dx, other.dx) and np.array_equal(self.dy, other.dy))

    __hash__ = None


def grid_points(origin, spacing, width, height) -> np.ndarray:
    xs = origin[0] + spacing * np.arange(width)
    ys = origin[1] + spacing * np.arange(height)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def apply_field(f: DisplacementField, p):
    return f.apply(p)


def field_roundtrip_residual(f: DisplacementField, g: DisplacementField, margin: float | None = None) -> float:
    """Max ``|g(f(p)) - p|`` over grid nodes of ``f`` whose forward image stays in the domain.

    ``margin`` (default: one grid cell) shrinks the domain used for that test.
    Outside the grid the field is clamped, which puts a kink on the boundary;
    a sampled inverse cannot follow that kink, and the boundary band carries no
    data anyway.
    """
    margin = f.spacing if margin is None else margin
    nodes = f.nodes()
    fwd = f.apply(nodes)
    x0, y0, x1, y1 = f.extent
    inside = ((fwd[:, 0] >= x0 + margin) & (fwd[:, 0] <= x1 - margin)
              & (fwd[:, 1] >= y0 + margin) & (fwd[:, 1] <= y1 - margin))
    if not np.any(inside):
        return 0.0
    back = g.apply(fwd[inside])
    return float(np.max(np.linalg.norm(back - nodes[inside], axis=1)))


def solve_field_inverse(f: DisplacementField, points, tol=DEFAULT_INVERSE_TOL,
                        max_iter=DEFAULT_INVERSE_MAX_ITER) -> np.ndarray:
    """Points ``x`` with ``x + f(x) = y`` for each query ``y``, by fixed-point iteration.

    Exact (to ``tol``) for the stored field, with no resampling of the inverse.
    """
    y, single = _as_points(points)
    x = y - f.displacement(y)
    res = np.linalg.norm(x + f.displacement(x) - y, axis=1)
    for _ in range(max(1, max_iter)):
        if res.size == 0 or res.max() <= tol * 1e-3:
            break
        x = y - f.displacement(x)
        res = np.linalg.norm(x + f.displacement(x) - y, axis=1)
    if res.size and res.max() > tol:
        raise NonConvergent(float(res.max()))
    return _restore(x, single)


def invert_field(f: DisplacementField, tol=DEFAULT_INVERSE_TOL, max_iter=DEFAULT_INVERSE_MAX_ITER,
                 max_refine: int = 3) -> DisplacementField:
    """Inverse displacement via the fixed point g <- -f(p + g(p)), starting at g = -f.

    The inverse is first sampled on f's own grid.  Bilinear interpolation of g
    between nodes limits the achievable round-trip error (roughly spacing² times
    the field's curvature), so when iterations stall above ``tol`` the grid
    spacing is halved, up to ``max_refine`` times.  ``max_iter`` bounds the
    iterations per grid level.
    """
    best = math.inf
    for level in range(max_refine + 1):
        k = 2 ** level
        spacing = f.spacing / k
        width, height = (f.width - 1) * k + 1, (f.height - 1) * k + 1
        nodes = grid_points(f.origin, spacing, width, height)
        d = f.displacement(nodes)
        prev = math.inf
        for _ in range(max(1, max_iter)):
            g = DisplacementField(f.origin, spacing, -d[:, 0].reshape(height, width),
                                  -d[:, 1].reshape(height, width))
            residual = field_roundtrip_residual(f, g)
            best = min(best, residual)
            if residual <= tol:
                return g
            if residual > 0.9 * prev:
                break  # stalled at this resolution
            prev = residual
            d = f.displacement(nodes + g.displacement(nodes))
    raise NonConvergent(best)


@dataclass(frozen=True, eq=False)
class PairTransform:
    source: int
    target: int
    affine: AffineTransform2D
    field: DisplacementField | None = None
    inverse_tol: float = DEFAULT_INVERSE_TOL
    inverse_max_iter: int = DEFAULT_INVERSE_MAX_ITER
    meta: dict = dc_field(default_factory=dict, compare=False)

    def __post_init__(self):
        gap = self.target - self.source
        if gap not in (1, 2):
            raise ValueError(f"pair ({self.source}, {self.target}) is neither adjacent nor interleave")

    @property
    def kind(self) -> PairKind:
        return PairKind.FORWARD_ADJACENT if self.target == self.source + 1 else PairKind.BACKWARD_INTERLEAVE

    @property
    def pair(self) -> tuple[int, int]:
        return (self.source, self.target)

    @cached_property
    def inverse_affine(self) -> AffineTransform2D:
        return self.affine.inverse()

    @cached_property
    def inverse_field(self) -> DisplacementField | None:
        if self.field is None or self.field.is_zero():
            return None
        return invert_field(self.field, self.inverse_tol, self.inverse_max_iter)

    def forward(self, points):
        pts, single = _as_points(points)
        out = self.affine.apply(pts)
        if self.field is not None:
            out = self.field.apply(out)
        return _restore(out, single)

    def inverse(self, points):
        pts, single = _as_points(points)
        if self.field is not None and not self.field.is_zero():
            pts = solve_field_inverse(self.field, pts, self.inverse_tol, self.inverse_max_iter)
        return _restore(self.inverse_affine.apply(pts), single)

    def map_points(self, points, direction=Direction.FORWARD):
        if Direction(direction) is Direction.FORWARD:
            return self.forward(points)
        return self.inverse(points)


def identity_pair(source: int, target: int) -> PairTransform:
    return PairTransform(source, target, AffineTransform2D.identity())


def map_point(t: PairTransform, p, direction=Direction.FORWARD):
    return t.map_points(p, direction)


def map_box(t: PairTransform, b: BBox, direction=Direction.FORWARD) -> ConvexPolygon:
    return ConvexPolygon.hull(t.map_points(b.corners(), direction))


def map_polygon(t: PairTransform, poly: ConvexPolygon, direction=Direction.FORWARD) -> ConvexPolygon:
    return ConvexPolygon.hull(t.map_points(poly.vertices, direction))


def map_circle(t: PairTransform, c: Circle, direction=Direction.FORWARD) -> Circle:
    """Map the center; scale the radius by the affine stage's isotropic factor."""
    center = t.map_points(np.asarray(c.center), direction)
    s = t.affine.scale_factor()
    if Direction(direction) is Direction.INVERSE:
        s = 1.0 / s
    return Circle(center, c.radius * s)
