"""On-disk formats shared by the CLI subcommands.

Dataset directory (what ``simulate`` writes and ``register``/``qa``/``track`` read)::

    manifest.json                 section count, unit scale, domain, file lists
    detections/section_NNN.txt    MOT15 rows with id = -1, frame = section + 1
    correspondences/pair_S_T.csv  src_x,src_y,dst_x,dst_y,weight
    fields/pair_S_T.json + .bin   optional external displacement fields
    gt/gt.txt                     optional MOT15 ground truth

Work directory: ``transforms/pair_S_T.affine.txt`` (+ ``.field.json``/``.field.bin``),
``qa.json``, ``results.txt``, ``scores.json``.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import Detection, detections_from_mot
from .mot_metrics import FrameSet, MotRecord, parse_mot15, read_mot15, write_mot15
from .registration import Matches
from .transform import AffineTransform2D, DisplacementField, PairTransform

FIELD_ORDER = "dx then dy, row-major"
CORR_HEADER = ["src_x", "src_y", "dst_x", "dst_y", "weight"]
PAIR_RE = re.compile(r"^pair_(\d+)_(\d+)")


class MissingInput(FileNotFoundError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)


def pair_name(s: int, t: int) -> str:
    return f"pair_{s}_{t}"


def parse_pair_name(name: str) -> tuple[int, int] | None:
    m = PAIR_RE.match(name)
    return (int(m.group(1)), int(m.group(2))) if m else None


def _num(v: float) -> str:
    return repr(float(v))


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# correspondences

def write_correspondences(path, m: Matches) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORR_HEADER)
        for (sx, sy), (dx, dy), wt in zip(m.src, m.dst, m.w):
            w.writerow([_num(sx), _num(sy), _num(dx), _num(dy), _num(wt)])


def read_correspondences(path) -> Matches:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CORR_HEADER:
            raise ValueError(f"{path}: header must be {','.join(CORR_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if not np.all(np.isfinite(vals)) or vals[4] < 0:
                raise ValueError(f"{path}:{lineno}: non-finite value or negative weight")
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return Matches(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


# ---------------------------------------------------------------------------
# transforms

def write_affine(path, t: AffineTransform2D) -> None:
    lines = [" ".join(_num(v) for v in row) for row in t.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_affine(path) -> AffineTransform2D:
    vals = Path(path).read_text().split()
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 matrix entries, got {len(vals)}")
    return AffineTransform2D(np.array([float(v) for v in vals]).reshape(3, 3))


def _sidecars(stem) -> tuple[Path, Path]:
    # suffixes are appended, not substituted: stems such as "pair_0_1.field" contain dots
    stem = str(stem)
    return Path(stem + ".bin"), Path(stem + ".json")


def write_field(stem, f: DisplacementField) -> None:
    """``stem.bin`` (little-endian float32, dx plane then dy plane) plus ``stem.json``."""
    bin_path, json_path = _sidecars(stem)
    planes = np.concatenate([f.dx.ravel(), f.dy.ravel()]).astype("<f4")
    bin_path.write_bytes(planes.tobytes())
    write_json(json_path, {
        "origin": [float(f.origin[0]), float(f.origin[1])],
        "spacing": float(f.spacing),
        "width": f.width,
        "height": f.height,
        "order": FIELD_ORDER,
        "dtype": "float32-le",
    })


def read_field(stem) -> DisplacementField:
    bin_path, json_path = _sidecars(stem)
    hdr = read_json(json_path)
    if hdr.get("order", FIELD_ORDER) != FIELD_ORDER:
        raise ValueError(f"{stem}: unsupported plane order {hdr.get('order')!r}")
    w, h = int(hdr["width"]), int(hdr["height"])
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != 2 * w * h:
        raise ValueError(f"{stem}: expected {2 * w * h} floats, found {raw.size}")
    dx = raw[: w * h].astype(float).reshape(h, w)
    dy = raw[w * h:].astype(float).reshape(h, w)
    return DisplacementField(tuple(hdr["origin"]), float(hdr["spacing"]), dx, dy)


def write_pair_transform(directory, t: PairTransform) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = pair_name(t.source, t.target)
    write_affine(directory / f"{name}.affine.txt", t.affine)
    stale = [directory / f"{name}.field.bin", directory / f"{name}.field.json"]
    if t.field is not None:
        write_field(directory / f"{name}.field", t.field)
    else:
        for p in stale:
            p.unlink(missing_ok=True)


def read_pair_transform(directory, s: int, t: int, inverse_tol=0.01, inverse_max_iter=20) -> PairTransform:
    directory = Path(directory)
    name = pair_name(s, t)
    aff_path = directory / f"{name}.affine.txt"
    if not aff_path.exists():
        raise MissingInput(f"missing transform {aff_path}", [(s, t)])
    field_ = None
    if (directory / f"{name}.field.json").exists():
        field_ = read_field(directory / f"{name}.field")
    return PairTransform(s, t, read_affine(aff_path), field_,
                         inverse_tol=inverse_tol, inverse_max_iter=inverse_max_iter)


def required_pairs(n_sections: int) -> list[tuple[int, int]]:
    return [(s, s + 1) for s in range(n_sections - 1)] + [(s, s + 2) for s in range(n_sections - 2)]


def read_transforms(directory, n_sections: int, **kw):
    """Adjacent and interleave maps keyed by source section."""
    missing = [p for p in required_pairs(n_sections)
               if not (Path(directory) / f"{pair_name(*p)}.affine.txt").exists()]
    if missing:
        raise MissingInput(f"missing transforms for pairs {missing}", missing)
    adjacent, interleave = {}, {}
    for s, t in required_pairs(n_sections):
        tr = read_pair_transform(directory, s, t, **kw)
        (adjacent if t == s + 1 else interleave)[s] = tr
    return adjacent, interleave


# ---------------------------------------------------------------------------
# dataset

@dataclass
class SeriesStack:
    """A dataset directory: section count plus where each input lives."""
    root: Path
    section_count: int
    detection_files: list[Path]
    correspondence_files: dict[tuple[int, int], Path] = field(default_factory=dict)
    field_files: dict[tuple[int, int], Path] = field(default_factory=dict)
    unit_um: float = 1.0
    domain: tuple[float, float, float, float] | None = None
    gt_file: Path | None = None

    def load_detections(self, shape_mode: str = "box") -> list[list[Detection]]:
        stack: list[list[Detection]] = []
        for s, path in enumerate(self.detection_files):
            fs = read_mot15(path, check_ids=False)
            bad = [f for f in fs.frames if f != s + 1 and fs.frames[f]]
            if bad:
                raise ValueError(f"{path}: rows for frame(s) {bad}, expected only frame {s + 1}")
            stack.append(detections_from_mot(fs, s + 1, shape_mode)[s])
        return stack

    def load_boxes(self) -> list[list]:
        return [[d.box for d in sec] for sec in self.load_detections("box")]


def write_detections(directory, stack: list[list[Detection]]) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for s, dets in enumerate(stack):
        recs = []
        for d in dets:
            b = d.box
            conf = 1.0 if d.score is None else d.score
            recs.append(MotRecord(s + 1, -1, b.x_min, b.y_min, b.width, b.height, conf))
        name = f"section_{s:03d}.txt"
        (directory / name).write_text(write_mot15(recs))
        names.append(name)
    return names


def load_stack(root) -> SeriesStack:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingInput(f"no manifest.json in {root}")
    man = read_json(manifest_path)
    n = int(man["sections"])
    det_files = [root / p for p in man["detections"]]
    absent = [str(p) for p in det_files if not p.exists()]
    if absent:
        raise MissingInput(f"missing detection files: {absent}")
    if len(det_files) != n:
        raise ValueError(f"manifest lists {len(det_files)} detection files for {n} sections")
    corr, fields = {}, {}
    for sub, target in (("correspondences", corr), ("fields", fields)):
        d = root / sub
        if d.is_dir():
            for p in sorted(d.iterdir()):
                pair = parse_pair_name(p.name)
                if pair is None:
                    continue
                if sub == "correspondences" and p.suffix == ".csv":
                    target[pair] = p
                elif sub == "fields" and p.suffix == ".json":
                    target[pair] = p.with_suffix("")
    gt = root / man["gt"] if man.get("gt") else None
    domain = tuple(man["domain"]) if man.get("domain") else None
    return SeriesStack(root, n, det_files, corr, fields, float(man.get("unit_um", 1.0)), domain, gt)


def read_frame_set(path) -> FrameSet:
    with open(path, newline="") as fh:
        return parse_mot15(fh)
