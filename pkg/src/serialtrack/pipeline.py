"""Subcommand bodies: simulate, register, qa, track, eval and the end-to-end run.

Every stage reads its inputs from disk and writes its outputs to the work
directory, so stages can be rerun independently.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io as sio
from .association import InconsistentStack, TrackSet, dpa_track, tracks_to_mot
from .config import PipelineConfig
from .cycle_qa import SeriesQA, assess_series, calibrate_q
from .mot_metrics import MotScore, evaluate, format_table, read_mot15, write_mot15
from .plotting import plot_cycle_qa, plot_threshold_sweep, plot_track_lengths
from .registration import GridSpec, RegistrationError, fit_pair
from .simulate import SimConfig, generate, visible_sections
from .transform import AffineTransform2D, PairTransform, SingularTransform

log = logging.getLogger(__name__)

FIGURES = "figures"


class FitFailure(RuntimeError):
    def __init__(self, failures: dict):
        self.failures = failures
        pairs = ", ".join(f"{s}-{t}: {msg}" for (s, t), msg in sorted(failures.items()))
        super().__init__(f"registration failed for pairs {pairs}")


def _executor(jobs: int):
    return ThreadPoolExecutor(max_workers=jobs) if jobs and jobs > 1 else nullcontext(None)


def _map(ex, fn, items):
    return list(ex.map(fn, items)) if ex is not None else [fn(i) for i in items]


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(sim: SimConfig, out) -> Path:
    out = Path(out)
    det_stack, truth = generate(sim)
    (out / "correspondences").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    names = sio.write_detections(out / "detections", det_stack)
    for (s, t), m in sorted(truth.correspondences.items()):
        sio.write_correspondences(out / "correspondences" / f"{sio.pair_name(s, t)}.csv", m)
    (out / "gt" / "gt.txt").write_text(write_mot15(tracks_to_mot(truth.gt_tracks)))
    w, h = sim.domain
    sio.write_json(out / "manifest.json", {
        "sections": sim.sections,
        "unit_um": 1.0,
        "domain": [0.0, 0.0, w, h],
        "detections": [f"detections/{n}" for n in names],
        "gt": "gt/gt.txt",
    })
    sio.write_json(out / "truth.json", truth_manifest(sim, truth))
    log.info("simulated %d sections, %d objects into %s", sim.sections, sim.objects, out)
    return out


def truth_manifest(sim: SimConfig, truth) -> dict:
    return {
        "schema_version": 1,
        "config": sim.to_dict(),
        "sections": sim.sections,
        "objects": [
            {"id": k + 1, "center": list(e.center), "radius_xy": e.radius_xy, "radius_z": e.radius_z,
             "visible_sections": visible_sections(sim, e)}
            for k, e in enumerate(truth.objects)
        ],
        "true_transforms": {
            sio.pair_name(s, t): {"affine": tr.affine.matrix.tolist(), "has_field": tr.field is not None}
            for (s, t), tr in sorted(truth.true_transforms.items())
        },
        "perturbations": truth.log,
    }


# ---------------------------------------------------------------------------
# register

def _grid_for(stack: sio.SeriesStack, cfg: PipelineConfig, corr: dict) -> GridSpec | None:
    if not cfg.tps:
        return None
    if stack.domain is not None:
        x0, y0, x1, y1 = stack.domain
    else:
        pts = [np.vstack([m.src, m.dst]) for m in corr.values() if len(m)]
        if not pts:
            return None
        allp = np.vstack(pts)
        x0, y0 = allp.min(axis=0)
        x1, y1 = allp.max(axis=0)
    m = cfg.tps_grid_margin
    return GridSpec.covering(x0 - m, y0 - m, x1 + m, y1 + m, cfg.tps_grid_spacing)


def cmd_register(stack: sio.SeriesStack, cfg: PipelineConfig, out, jobs: int = 1) -> dict:
    out = Path(out)
    pairs = sio.required_pairs(stack.section_count)
    missing = [p for p in pairs if p not in stack.correspondence_files and p not in stack.field_files]
    if missing:
        raise sio.MissingInput(f"no correspondences or fields for pairs {missing}", missing)
    corr = {p: sio.read_correspondences(stack.correspondence_files[p])
            for p in pairs if p in stack.correspondence_files}
    grid = _grid_for(stack, cfg, corr)
    opts = cfg.fit_options(grid)

    def fit(p):
        s, t = p
        ext = sio.read_field(stack.field_files[p]) if p in stack.field_files else None
        try:
            if p in corr:
                return p, fit_pair(s, t, corr[p], opts, field=ext), None
            return p, PairTransform(s, t, AffineTransform2D.identity(), ext,
                                    inverse_tol=cfg.inverse_tol,
                                    inverse_max_iter=cfg.inverse_max_iter), None
        except (RegistrationError, SingularTransform, np.linalg.LinAlgError) as exc:
            return p, None, f"{type(exc).__name__}: {exc}"

    with _executor(jobs) as ex:
        results = _map(ex, fit, pairs)
    failures = {p: err for p, _, err in results if err}
    if failures:
        raise FitFailure(failures)
    tdir = out / "transforms"
    fitted = {}
    for p, tr, _ in results:
        sio.write_pair_transform(tdir, tr)
        fitted[p] = tr
    log.info("registered %d pairs into %s", len(fitted), tdir)
    return fitted


def load_transforms(stack: sio.SeriesStack, cfg: PipelineConfig, out):
    return sio.read_transforms(Path(out) / "transforms", stack.section_count,
                               inverse_tol=cfg.inverse_tol, inverse_max_iter=cfg.inverse_max_iter)


# ---------------------------------------------------------------------------
# qa

def cmd_qa(stack: sio.SeriesStack, cfg: PipelineConfig, out, jobs: int = 1) -> SeriesQA:
    out = Path(out)
    if stack.section_count < 3:
        raise InconsistentStack("cycle QA needs at least three sections")
    adjacent, interleave = load_transforms(stack, cfg, out)
    boxes = stack.load_boxes()
    with _executor(jobs) as ex:
        qa = assess_series(boxes, adjacent, interleave, q=cfg.q_threshold, executor=ex)
    report = qa.to_json()
    all_boxes = [b for sec in boxes for b in sec]
    if all_boxes:
        report["q_calibration"] = {
            "shift": cfg.calibration_shift,
            "suggested_q": round(calibrate_q(all_boxes, cfg.calibration_shift, trials=20, seed=0), 6),
        }
    sio.write_json(out / "qa.json", report)
    with open(out / "qa.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "median_iou", "fc"])
        for row in report["pairs"]:
            w.writerow([row["t"], "" if row["median_iou"] is None else f"{row['median_iou']:.6f}", row["fc"]])
    plot_cycle_qa(qa, out / FIGURES / "qa_cycle_iou.png")
    log.info("series quality %s (pair flags %s)", qa.quality.quality.value, qa.pair_flags)
    return qa


# ---------------------------------------------------------------------------
# track

def _pair_flags(n: int, out: Path, qa_path=None, assume_good: bool = False):
    if assume_good:
        return [0] * (n - 1), {}
    qa_path = Path(qa_path) if qa_path else out / "qa.json"
    if not qa_path.exists():
        raise sio.MissingInput(f"no QA report at {qa_path} (run qa or pass --assume-good)")
    qa = SeriesQA.from_json(sio.read_json(qa_path))
    if len(qa.pair_flags) != n - 1:
        raise InconsistentStack(f"QA report has {len(qa.pair_flags)} pair flags for {n} sections")
    return qa.pair_flags, {c.t: c.fc for c in qa.cycles if not c.indeterminate}


def track_stack(stack: sio.SeriesStack, cfg: PipelineConfig, out, qa_path=None,
                assume_good: bool = False, transforms=None) -> TrackSet:
    out = Path(out)
    adjacent, interleave = transforms or load_transforms(stack, cfg, out)
    fc, cycle_fc = _pair_flags(stack.section_count, out, qa_path, assume_good)
    dets = stack.load_detections(cfg.shape_mode)
    return dpa_track(dets, adjacent, interleave, fc, s=cfg.s_threshold, cycle_fc=cycle_fc,
                     matcher=cfg.matcher)


def cmd_track(stack: sio.SeriesStack, cfg: PipelineConfig, out, qa_path=None,
              assume_good: bool = False) -> TrackSet:
    out = Path(out)
    ts = track_stack(stack, cfg, out, qa_path, assume_good)
    (out / "results.txt").write_text(write_mot15(tracks_to_mot(ts)))
    plot_track_lengths(ts, out / FIGURES / "track_lengths.png", stack.section_count)
    n_det = sum(len(v) for v in ts.tracks.values())
    log.info("tracked %d detections into %d tracks", n_det, len(ts))
    return ts


# ---------------------------------------------------------------------------
# eval

def cmd_eval(gt_path, results_path, cfg: PipelineConfig, out=None, name: str = "scores") -> MotScore:
    gt = read_mot15(gt_path)
    hyp = read_mot15(results_path)
    score = evaluate(gt, hyp, cfg.match_iou)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        sio.write_json(out / f"{name}.json", _score_json(score))
        (out / f"{name}.txt").write_text(format_table(score))
        write_score_csv(out / f"{name}.csv", [("result", score)])
    return score


def _score_json(score: MotScore) -> dict:
    row = {k: (round(v, 6) if isinstance(v, float) else int(v)) for k, v in score.row().items()}
    row["extra"] = score.extra
    return row


def write_score_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        first = rows[0][1].row()
        w.writerow(["name"] + list(first))
        for name, score in rows:
            w.writerow([name] + [f"{v:.4f}" if isinstance(v, float) else int(v) for v in score.row().values()])


# ---------------------------------------------------------------------------
# end to end

def run_pipeline(cfg: PipelineConfig, out, dataset=None, jobs: int = 1,
                 s_sweep=None, assume_good: bool = False) -> dict:
    """Simulate (when no dataset is given), register, QA, track and evaluate."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        if cfg.simulation is None:
            raise sio.MissingInput("pipeline needs --dataset or a 'simulation' section in the config")
        dataset = cmd_simulate(cfg.simulation, out / "dataset")
    stack = sio.load_stack(dataset)
    cmd_register(stack, cfg, out, jobs)
    qa = None
    if not assume_good:
        qa = cmd_qa(stack, cfg, out, jobs)
    ts = cmd_track(stack, cfg, out, assume_good=assume_good)
    summary = {"tracks": len(ts), "series_class": qa.quality.quality.value if qa else None}
    if stack.gt_file is not None and stack.gt_file.exists():
        score = cmd_eval(stack.gt_file, out / "results.txt", cfg, out)
        summary["scores"] = _score_json(score)
        if s_sweep:
            rows = sweep_s(stack, cfg, out, s_sweep, assume_good)
            summary["sweep"] = {f"{s:g}": round(sc.idf1, 6) for s, sc in rows}
    sio.write_json(out / "summary.json", summary)
    return summary


def sweep_s(stack: sio.SeriesStack, cfg: PipelineConfig, out, values, assume_good: bool = False):
    """Track and score once per association threshold; writes sweep.csv/.txt and a figure."""
    out = Path(out)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    transforms = load_transforms(stack, cfg, out)
    rows = []
    for s in values:
        scfg = cfg.with_overrides(s_threshold=s)
        ts = track_stack(stack, scfg, out, assume_good=assume_good, transforms=transforms)
        path = sweep_dir / f"results_s{s:g}.txt"
        path.write_text(write_mot15(tracks_to_mot(ts)))
        rows.append((s, cmd_eval(stack.gt_file, path, scfg)))
    write_score_csv(out / "sweep.csv", [(f"s={s:g}", sc) for s, sc in rows])
    (out / "sweep.txt").write_text(format_table({f"s={s:g}": sc for s, sc in rows}))
    plot_threshold_sweep(rows, out / FIGURES / "s_sweep.png")
    return rows
