"""Synthetic serial-section stacks with known ground truth.

Objects are ellipsoids in a world volume; every section plane cuts them into
circles. Each section has its own coordinate frame, reached from the world by
a small affine jitter followed by a smooth sinusoidal deformation, so the true
section-to-section maps are known exactly. Detections are a noisy copy of the
ground-truth boxes; keypoint correspondences are sampled from the true maps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .association import Detection, TrackSet
from .geometry import BBox, Circle
from .registration import GridSpec, Matches
from .transform import AffineTransform2D, DisplacementField, PairTransform

# stream ids for counter-based generators
_PLACE, _SECTION, _DEFORM, _NOISE, _CORR, _FAIL = range(6)


class InfeasiblePlacement(RuntimeError):
    pass


@dataclass
class SimConfig:
    sections: int = 12
    objects: int = 50
    object_diameter_mean: float = 87.0
    object_diameter_sd: float = 17.0
    min_diameter: float = 40.0
    z_aspect: float = 1.0
    section_thickness: float = 8.0
    domain: tuple[float, float] = (1200.0, 1200.0)
    z_margin: float = 30.0
    min_visible_radius: float = 15.0
    separation: float = 4.0
    rotation_jitter_deg: float = 2.0
    translation_jitter: float = 15.0
    scale_jitter: float = 0.02
    deformation_amplitude: float = 3.0
    deformation_period: float = 400.0
    box_noise: float = 0.0
    dropout_rate: float = 0.0
    false_positive_rate: float = 0.0
    missing_sections: list[int] = field(default_factory=list)
    failed_pairs: list[tuple[int, int]] = field(default_factory=list)
    keypoints_per_pair: int = 80
    keypoint_noise: float = 0.0
    keypoint_outlier_fraction: float = 0.0
    failure_offset: float = 300.0
    grid_spacing: float = 25.0
    grid_margin: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.sections < 1 or self.objects < 1:
            raise ValueError("sections and objects must be >= 1")
        for name in ("dropout_rate", "false_positive_rate", "keypoint_outlier_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        self.domain = tuple(float(v) for v in self.domain)
        self.missing_sections = sorted(int(s) for s in self.missing_sections)
        self.failed_pairs = [tuple(int(v) for v in p) for p in self.failed_pairs]
        for s, t in self.failed_pairs:
            if t - s not in (1, 2) or not 0 <= s < t < self.sections:
                raise ValueError(f"failed pair {(s, t)} is not a valid adjacent/interleave pair")

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        d["failed_pairs"] = [list(p) for p in self.failed_pairs]
        return d

    def grid(self) -> GridSpec:
        w, h = self.domain
        m = self.grid_margin
        return GridSpec.covering(-m, -m, w + m, h + m, self.grid_spacing)


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radius_xy: float
    radius_z: float


@dataclass
class SimTruth:
    gt_tracks: TrackSet
    true_transforms: dict[tuple[int, int], PairTransform]
    correspondences: dict[tuple[int, int], Matches]
    objects: list[Ellipsoid]
    log: list[dict]
    gt_stack: list[list[Detection]]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def slice_ellipsoid(center3d, radii3d, z: float) -> Circle | None:
    """Cross-section of an axis-aligned spheroid with the plane ``z``; tangent planes give None."""
    cx, cy, cz = center3d
    rxy, rz = radii3d
    if rxy <= 0 or rz <= 0:
        raise ValueError("radii must be positive")
    u = (z - cz) / rz
    if abs(u) >= 1.0:
        return None
    return Circle((cx, cy), rxy * math.sqrt(1.0 - u * u))


class SectionFrame:
    """World -> section coordinates: affine jitter, then a smooth sinusoidal displacement."""

    def __init__(self, affine: AffineTransform2D, amp: float, period: float, phases):
        self.affine = affine
        self.amp = amp
        self.k = 2 * math.pi / period
        self.phases = tuple(float(p) for p in phases)

    def displacement(self, q: np.ndarray) -> np.ndarray:
        if self.amp == 0:
            return np.zeros_like(q)
        p0, p1 = self.phases
        return self.amp * np.column_stack([
            np.sin(self.k * q[:, 1] + p0),
            np.sin(self.k * q[:, 0] + p1),
        ])

    def forward(self, world: np.ndarray) -> np.ndarray:
        q = self.affine.apply(np.asarray(world, dtype=float).reshape(-1, 2))
        return q + self.displacement(q)

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        q = pts.copy()
        if self.amp:
            for _ in range(100):
                nq = pts - self.displacement(q)
                if np.max(np.abs(nq - q)) < 1e-13:
                    q = nq
                    break
                q = nq
        return self.affine.inverse().apply(q)


def _place_objects(cfg: SimConfig) -> list[Ellipsoid]:
    rng = _rng(cfg.seed, _PLACE)
    w, h = cfg.domain
    depth = (cfg.sections - 1) * cfg.section_thickness
    placed: list[Ellipsoid] = []
    attempts = 0
    max_attempts = 2000 * cfg.objects
    while len(placed) < cfg.objects:
        attempts += 1
        if attempts > max_attempts:
            raise InfeasiblePlacement(
                f"placed {len(placed)} of {cfg.objects} objects in a {w:g}x{h:g} domain")
        d = max(cfg.min_diameter, rng.normal(cfg.object_diameter_mean, cfg.object_diameter_sd))
        r = d / 2
        x = rng.uniform(r, w - r)
        y = rng.uniform(r, h - r)
        z = rng.uniform(-cfg.z_margin, depth + cfg.z_margin)
        # disjoint footprints imply disjoint ellipsoids
        if any(math.hypot(x - e.center[0], y - e.center[1]) < r + e.radius_xy + cfg.separation
               for e in placed):
            continue
        placed.append(Ellipsoid((x, y, z), r, r * cfg.z_aspect))
    return placed


def _section_frames(cfg: SimConfig) -> list[SectionFrame]:
    frames = []
    cx, cy = cfg.domain[0] / 2, cfg.domain[1] / 2
    for s in range(cfg.sections):
        rng = _rng(cfg.seed, _SECTION, s)
        ang = rng.uniform(-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg)
        sc = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
        tx, ty = rng.uniform(-cfg.translation_jitter, cfg.translation_jitter, size=2)
        aff = AffineTransform2D.similarity(sc, ang, tx, ty, center=(cx, cy))
        drng = _rng(cfg.seed, _DEFORM, s)
        phases = drng.uniform(0, 2 * math.pi, size=2)
        frames.append(SectionFrame(aff, cfg.deformation_amplitude, cfg.deformation_period, phases))
    return frames


def true_pair_transform(frames: list[SectionFrame], s: int, t: int, grid: GridSpec | None) -> PairTransform:
    """Exact map section s -> section t as affine plus a sampled residual field."""
    fs, ft = frames[s], frames[t]
    affine = ft.affine @ fs.affine.inverse()
    field_ = None
    if grid is not None and (fs.amp or ft.amp):
        nodes = grid.points()
        src = affine.inverse().apply(nodes)
        exact = ft.forward(fs.inverse(src))
        res = exact - nodes
        field_ = DisplacementField(grid.origin, grid.spacing,
                                   res[:, 0].reshape(grid.height, grid.width),
                                   res[:, 1].reshape(grid.height, grid.width))
    return PairTransform(s, t, affine, field_, meta={"truth": True})


def _circle_box(frame: SectionFrame, c: Circle, n: int = 32) -> BBox:
    a = np.linspace(0, 2 * math.pi, n, endpoint=False)
    pts = np.column_stack([c.center[0] + c.radius * np.cos(a), c.center[1] + c.radius * np.sin(a)])
    mapped = frame.forward(pts)
    lo, hi = mapped.min(axis=0), mapped.max(axis=0)
    return BBox(lo[0], lo[1], hi[0], hi[1])


def _corruption(cfg: SimConfig, pair) -> AffineTransform2D:
    rng = _rng(cfg.seed, _FAIL, pair[0], pair[1])
    direction = rng.uniform(0, 2 * math.pi)
    mag = cfg.failure_offset * rng.uniform(1.0, 1.5)
    ang = rng.uniform(-10, 10)
    return AffineTransform2D.similarity(1.0, ang, mag * math.cos(direction), mag * math.sin(direction),
                                        center=(cfg.domain[0] / 2, cfg.domain[1] / 2))


def _correspondences(cfg: SimConfig, frames, s: int, t: int, log: list) -> Matches:
    rng = _rng(cfg.seed, _CORR, s, t)
    n = cfg.keypoints_per_pair
    w, h = cfg.domain
    world = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    src = frames[s].forward(world)
    dst = frames[t].forward(world)
    if cfg.keypoint_noise:
        dst = dst + rng.normal(0, cfg.keypoint_noise, size=dst.shape)
    n_out = int(round(cfg.keypoint_outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        dst[idx] = np.column_stack([rng.uniform(0, w, n_out), rng.uniform(0, h, n_out)])
    if (s, t) in cfg.failed_pairs:
        corr = _corruption(cfg, (s, t))
        dst = corr.apply(dst)
        log.append({"kind": "failed_pair", "pair": [s, t], "corruption": corr.matrix[:2].tolist()})
    return Matches(src, dst, np.ones(n))


def generate(cfg: SimConfig, with_fields: bool = True):
    """Build detections and ground truth for ``cfg``.

    Returns ``(detection_stack, truth)`` where ``detection_stack[s]`` lists the
    noisy detections on section ``s`` (no track IDs) and ``truth.gt_tracks``
    groups the clean boxes by object.
    """
    objects = _place_objects(cfg)
    frames = _section_frames(cfg)
    grid = cfg.grid() if with_fields else None
    log: list[dict] = []

    gt_stack: list[list[Detection]] = []
    tracks: dict[int, list[Detection]] = {}
    missing = set(cfg.missing_sections)
    for s in range(cfg.sections):
        z = s * cfg.section_thickness
        dets = []
        for k, e in enumerate(objects):
            c = slice_ellipsoid(e.center, (e.radius_xy, e.radius_z), z)
            if c is None or c.radius < cfg.min_visible_radius:
                continue
            if s in missing:
                continue
            d = Detection(s, _circle_box(frames[s], c), 1.0, k + 1)
            dets.append(d)
            tracks.setdefault(k + 1, []).append(d)
        gt_stack.append(dets)
    for s in sorted(missing):
        log.append({"kind": "missing_section", "section": s})

    det_stack: list[list[Detection]] = []
    w, h = cfg.domain
    for s, gts in enumerate(gt_stack):
        rng = _rng(cfg.seed, _NOISE, s)
        out = []
        dropped = 0
        for d in gts:
            if cfg.dropout_rate and rng.random() < cfg.dropout_rate:
                dropped += 1
                continue
            b = d.shape
            if cfg.box_noise:
                jit = rng.normal(0, cfg.box_noise, size=4)
                x0, y0 = b.x_min + jit[0], b.y_min + jit[1]
                x1 = max(b.x_max + jit[2], x0 + 1.0)
                y1 = max(b.y_max + jit[3], y0 + 1.0)
                b = BBox(x0, y0, x1, y1)
            out.append(Detection(s, b, 1.0))
        n_fp = int(rng.binomial(len(gts), cfg.false_positive_rate)) if cfg.false_positive_rate and gts else 0
        for _ in range(n_fp):
            side = max(10.0, rng.normal(cfg.object_diameter_mean, cfg.object_diameter_sd)) * rng.uniform(0.4, 1.0)
            x0 = rng.uniform(0, w - side)
            y0 = rng.uniform(0, h - side)
            out.append(Detection(s, BBox(x0, y0, x0 + side, y0 + side), round(float(rng.uniform(0.3, 0.9)), 3)))
        if dropped or n_fp:
            log.append({"kind": "detection_noise", "section": s, "dropped": dropped, "false_positives": n_fp})
        # detections are sorted so files do not leak object order
        out.sort(key=lambda d: (d.box.x_min, d.box.y_min))
        det_stack.append(out)

    pairs = [(s, s + 1) for s in range(cfg.sections - 1)] + [(s, s + 2) for s in range(cfg.sections - 2)]
    true_transforms = {p: true_pair_transform(frames, p[0], p[1], grid) for p in pairs}
    correspondences = {p: _correspondences(cfg, frames, p[0], p[1], log) for p in pairs}
    gt_tracks = TrackSet({k: v for k, v in sorted(tracks.items())})
    truth = SimTruth(gt_tracks, true_transforms, correspondences, objects, log, gt_stack)
    return det_stack, truth


def visible_sections(cfg: SimConfig, e: Ellipsoid) -> int:
    """Sections on which ``e`` leaves a visible cross-section."""
    n = 0
    for s in range(cfg.sections):
        c = slice_ellipsoid(e.center, (e.radius_xy, e.radius_z), s * cfg.section_thickness)
        if c is not None and c.radius >= cfg.min_visible_radius and s not in cfg.missing_sections:
            n += 1
    return n
