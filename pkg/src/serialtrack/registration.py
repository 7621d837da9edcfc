"""Fit pair transforms from keypoint correspondences.

The affine stage is a weighted least-squares fit, optionally wrapped in RANSAC;
the non-rigid stage is a thin-plate spline through the residuals left after the
affine stage, sampled onto a regular displacement grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import Point2D
from .transform import AffineTransform2D, DisplacementField, PairTransform, grid_points

log = logging.getLogger(__name__)

COLLINEAR_RTOL = 1e-9
TPS_MAX_COND = 1e13


class RegistrationError(Exception):
    pass


class DegenerateConfiguration(RegistrationError):
    pass


class NoConsensus(RegistrationError):
    def __init__(self, fraction, required):
        self.fraction = fraction
        self.required = required
        super().__init__(f"best inlier fraction {fraction:.3f} below required {required:.3f}")


class IllConditioned(RegistrationError):
    pass


class InvalidPair(RegistrationError):
    pass


@dataclass(frozen=True)
class Correspondence:
    p_source: Point2D
    p_target: Point2D
    weight: float = 1.0

    def __post_init__(self):
        vals = (*self.p_source, *self.p_target, self.weight)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite correspondence {vals}")
        if self.weight < 0:
            raise ValueError("correspondence weight must be non-negative")


class Matches(NamedTuple):
    """Array view of a correspondence list: (n, 2) source, (n, 2) target, (n,) weights."""
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray

    def __len__(self):
        return len(self.w)

    def subset(self, mask) -> "Matches":
        return Matches(self.src[mask], self.dst[mask], self.w[mask])


def as_matches(corr) -> Matches:
    if isinstance(corr, Matches):
        return corr
    if isinstance(corr, np.ndarray):
        arr = np.asarray(corr, dtype=float)
        if arr.ndim != 2 or arr.shape[1] not in (4, 5):
            raise ValueError("correspondence array must be (n, 4) or (n, 5)")
        w = arr[:, 4] if arr.shape[1] == 5 else np.ones(len(arr))
        return Matches(arr[:, 0:2].copy(), arr[:, 2:4].copy(), np.asarray(w, dtype=float))
    corr = list(corr)
    src = np.array([c.p_source for c in corr], dtype=float).reshape(-1, 2)
    dst = np.array([c.p_target for c in corr], dtype=float).reshape(-1, 2)
    w = np.array([c.weight for c in corr], dtype=float)
    return Matches(src, dst, w)


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 2000
    inlier_threshold: float = 10.0
    min_inlier_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in (0, 1]")


def _check_spread(src: np.ndarray, w: np.ndarray, need: int = 3):
    active = src[w > 0]
    if len(active) < need:
        raise DegenerateConfiguration(f"need at least {need} weighted correspondences, got {len(active)}")
    centered = active - active.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= COLLINEAR_RTOL * sv[0]:
        raise DegenerateConfiguration("source points are collinear")


def fit_affine_lsq(corr, model: str = "affine") -> AffineTransform2D:
    """Weighted least squares, minimising sum w_i |A(src_i) - dst_i|^2.

    ``model="similarity"`` restricts the fit to rotation, uniform scale and
    translation, for correspondence sets too thin to pin a full affine.
    """
    m = as_matches(corr)
    if model == "similarity":
        return _fit_similarity(m)
    if model != "affine":
        raise ValueError(f"unknown affine model {model!r}")
    _check_spread(m.src, m.w)
    sw = np.sqrt(m.w)[:, None]
    design = np.column_stack([m.src, np.ones(len(m))]) * sw
    params, *_ = np.linalg.lstsq(design, m.dst * sw, rcond=None)
    mat = np.eye(3)
    mat[:2, :] = params.T
    return AffineTransform2D(mat)


def _fit_similarity(m: Matches) -> AffineTransform2D:
    active = m.w > 0
    if active.sum() < 2 or np.ptp(m.src[active], axis=0).max() == 0:
        raise DegenerateConfiguration("similarity fit needs two distinct weighted points")
    x, y = m.src[:, 0], m.src[:, 1]
    one, zero = np.ones(len(m)), np.zeros(len(m))
    rows = np.vstack([
        np.column_stack([x, -y, one, zero]),
        np.column_stack([y, x, zero, one]),
    ])
    rhs = np.concatenate([m.dst[:, 0], m.dst[:, 1]])
    sw = np.sqrt(np.concatenate([m.w, m.w]))
    (a, b, tx, ty), *_ = np.linalg.lstsq(rows * sw[:, None], rhs * sw, rcond=None)
    return AffineTransform2D([[a, -b, tx], [b, a, ty], [0, 0, 1]])


def residuals(t: AffineTransform2D, corr) -> np.ndarray:
    m = as_matches(corr)
    return np.linalg.norm(t.apply(m.src) - m.dst, axis=1)


def fit_affine_ransac(corr, params: RansacParams = RansacParams(), model: str = "affine"):
    """Consensus affine; returns ``(transform, inlier_mask)``.

    Minimal 3-point hypotheses are drawn from a seeded generator and scored in
    one batch; ties on inlier count keep the earliest hypothesis. The winner's
    inliers are refit by least squares and the mask re-evaluated until stable.
    """
    m = as_matches(corr)
    n = len(m)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {n}")
    rng = np.random.default_rng(params.seed)
    samples = np.argsort(rng.random((params.max_iterations, n)), axis=1)[:, :3]

    src3 = m.src[samples]  # (k, 3, 2)
    dst3 = m.dst[samples]
    design = np.concatenate([src3, np.ones(src3.shape[:2] + (1,))], axis=2)  # (k, 3, 3)
    det = np.linalg.det(design)
    scale = np.abs(src3 - src3.mean(axis=1, keepdims=True)).max(axis=(1, 2)) + 1e-300
    ok = np.abs(det) > 1e-9 * scale ** 2
    if not np.any(ok):
        raise DegenerateConfiguration("every minimal sample is collinear")
    sol = np.linalg.solve(design[ok], dst3[ok])  # (k', 3, 2): rows = coefficients for x, y, 1
    pred = np.einsum("nj,kjd->knd", np.column_stack([m.src, np.ones(n)]), sol)
    err = np.linalg.norm(pred - m.dst[None], axis=2)
    inl = err < params.inlier_threshold
    counts = inl.sum(axis=1)
    best = int(np.argmax(counts))
    mask = inl[best]

    transform = None
    for _ in range(10):
        if mask.sum() < 3:
            break
        try:
            transform = fit_affine_lsq(m.subset(mask), model=model)
        except DegenerateConfiguration:
            break
        new_mask = residuals(transform, m) < params.inlier_threshold
        if np.array_equal(new_mask, mask):
            break
        if new_mask.sum() < mask.sum():
            break
        mask = new_mask

    fraction = float(mask.sum()) / n
    if transform is None or fraction < params.min_inlier_fraction:
        raise NoConsensus(fraction, params.min_inlier_fraction)
    return transform, mask.copy()


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    spacing: float
    width: int
    height: int

    def __post_init__(self):
        if not self.spacing > 0 or self.width < 2 or self.height < 2:
            raise ValueError(f"invalid grid {self}")

    @classmethod
    def covering(cls, x0, y0, x1, y1, spacing) -> "GridSpec":
        width = int(math.ceil((x1 - x0) / spacing)) + 1
        height = int(math.ceil((y1 - y0) / spacing)) + 1
        return cls((float(x0), float(y0)), float(spacing), max(width, 2), max(height, 2))

    def points(self) -> np.ndarray:
        return grid_points(self.origin, self.spacing, self.width, self.height)


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        k = r * r * np.log(r)
    k[r == 0] = 0.0
    return k


class ThinPlateSpline:
    """2D thin-plate spline mapping control points to vector values.

    Coordinates are normalised to the control points' centroid and RMS radius
    before solving, so ``regularization`` is measured in those units.
    """

    def __init__(self, points, values, regularization: float = 0.0):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        vals = np.asarray(values, dtype=float).reshape(len(pts), -1)
        if regularization < 0:
            raise ValueError("regularization must be >= 0")
        _check_spread(pts, np.ones(len(pts)))
        self.center = pts.mean(axis=0)
        self.scale = float(np.sqrt(((pts - self.center) ** 2).sum(axis=1).mean()))
        self.points = (pts - self.center) / self.scale
        n = len(pts)
        kmat = _tps_kernel(np.linalg.norm(self.points[:, None] - self.points[None], axis=2))
        pmat = np.column_stack([np.ones(n), self.points])
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = kmat + regularization * np.eye(n)
        system[:n, n:] = pmat
        system[n:, :n] = pmat.T
        cond = np.linalg.cond(system)
        if not math.isfinite(cond) or cond > TPS_MAX_COND:
            raise IllConditioned(f"TPS system condition number {cond:.3g}")
        rhs = np.zeros((n + 3, vals.shape[1]))
        rhs[:n] = vals
        coef = np.linalg.solve(system, rhs)
        self.kernel = kmat
        self.weights = coef[:n]
        self.affine = coef[n:]
        self.regularization = regularization

    def __call__(self, query) -> np.ndarray:
        q = (np.asarray(query, dtype=float).reshape(-1, 2) - self.center) / self.scale
        k = _tps_kernel(np.linalg.norm(q[:, None] - self.points[None], axis=2))
        return k @ self.weights + np.column_stack([np.ones(len(q)), q]) @ self.affine

    def bending_energy(self) -> float:
        """Sum over output components of w^T K w (proportional to the bending integral)."""
        return float(np.einsum("ic,ij,jc->", self.weights, self.kernel, self.weights))


def fit_tps(corr, regularization: float = 0.0, grid: GridSpec | None = None,
            affine: AffineTransform2D | None = None) -> DisplacementField:
    """Residual field after the affine stage, sampled on ``grid``.

    Control points sit at ``affine(src)`` with values ``dst - affine(src)``, so
    the returned field composes as ``field(affine(p))``. With ``affine=None``
    the residuals are taken against the identity.
    """
    m = as_matches(corr)
    if len(m) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(m)}")
    if grid is None:
        raise ValueError("fit_tps needs a grid")
    moved = affine.apply(m.src) if affine is not None else m.src
    res = m.dst - moved
    if not np.any(res):
        return DisplacementField.zeros(grid.origin, grid.spacing, grid.width, grid.height)
    try:
        spline = ThinPlateSpline(moved, res, regularization)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned(str(exc)) from exc
    d = spline(grid.points())
    return DisplacementField(grid.origin, grid.spacing,
                             d[:, 0].reshape(grid.height, grid.width),
                             d[:, 1].reshape(grid.height, grid.width))


def build_pair_transform(source: int, target: int, affine: AffineTransform2D,
                         field: DisplacementField | None = None, **kw) -> PairTransform:
    if target - source not in (1, 2):
        raise InvalidPair(f"pair ({source}, {target}) is neither adjacent nor interleave")
    return PairTransform(source, target, affine, field, **kw)


@dataclass(frozen=True)
class FitOptions:
    ransac: RansacParams = RansacParams()
    use_ransac: bool = True
    model: str = "affine"
    tps: bool = True
    tps_regularization: float = 0.1
    grid: GridSpec | None = None
    inverse_tol: float = 0.01
    inverse_max_iter: int = 20


def fit_pair(source: int, target: int, corr, opts: FitOptions = FitOptions(),
             field: DisplacementField | None = None) -> PairTransform:
    """Affine (robust or plain) plus an optional TPS residual field.

    An externally supplied ``field`` takes the place of the TPS stage.
    """
    m = as_matches(corr)
    if opts.use_ransac:
        affine, mask = fit_affine_ransac(m, opts.ransac, model=opts.model)
    else:
        affine = fit_affine_lsq(m, model=opts.model)
        mask = np.ones(len(m), dtype=bool)
    if field is None and opts.tps and opts.grid is not None:
        field = fit_tps(m.subset(mask), opts.tps_regularization, opts.grid, affine=affine)
        if field.max_abs() < 1e-12:
            field = None
    meta = {"n_correspondences": len(m), "n_inliers": int(mask.sum())}
    return build_pair_transform(source, target, affine, field,
                                inverse_tol=opts.inverse_tol,
                                inverse_max_iter=opts.inverse_max_iter, meta=meta)


@dataclass
class RegistrationErrorReport:
    median: float
    mean: float
    distances: np.ndarray


def registration_error(t: PairTransform, landmarks: Iterable) -> RegistrationErrorReport:
    """Distances between mapped source landmarks and their target counterparts."""
    m = as_matches(landmarks)
    if len(m) == 0:
        raise ValueError("registration_error needs at least one landmark")
    d = np.linalg.norm(t.forward(m.src) - m.dst, axis=1)
    return RegistrationErrorReport(float(np.median(d)), float(np.mean(d)), d)
