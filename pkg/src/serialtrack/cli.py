"""serialtrack command line.

    serialtrack simulate --config sim.yaml --out data/
    serialtrack register --dataset data/ --out work/
    serialtrack qa       --dataset data/ --out work/
    serialtrack track    --dataset data/ --out work/ [--assume-good]
    serialtrack eval     --gt data/gt/gt.txt --results work/results.txt --out work/
    serialtrack pipeline --config cfg.yaml --out work/ [--dataset data/] [--s-sweep 0.1,0.2]

Exit codes: 0 ok, 2 bad or missing input, 3 numerical failure, 4 inconsistent stack.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import io as sio
from .association import InconsistentStack, MissingTransform
from .config import ConfigError, PipelineConfig
from .mot_metrics import FrameMismatch, MalformedLine, format_table
from .pipeline import (FitFailure, cmd_eval, cmd_qa, cmd_register, cmd_simulate, cmd_track,
                       run_pipeline)
from .registration import RegistrationError
from .simulate import InfeasiblePlacement, SimConfig
from .transform import NonConvergent, SingularTransform

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INCONSISTENT = 0, 2, 3, 4

log = logging.getLogger("serialtrack")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--jobs", type=int, default=1, help="parallel pair-level workers")
    common.add_argument("--seed", type=int, help="override the simulation / RANSAC seed")
    common.add_argument("--shape-mode", choices=("box", "circle"))
    common.add_argument("--s-threshold", type=float, help="association IoU threshold S")
    common.add_argument("--q-threshold", type=float, help="cycle-consistency threshold Q")
    common.add_argument("--assume-good", action="store_true", help="track without a QA report")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="serialtrack", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sp.add_argument("--out", required=True)

    for name, text in (("register", "fit adjacent and interleave transforms"),
                       ("qa", "cycle-consistency QA report"),
                       ("track", "dual-path association to MOT15 results")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--out", required=True, help="work directory")
        if name == "track":
            sp.add_argument("--qa", help="QA report (default: <out>/qa.json)")

    sp = sub.add_parser("eval", parents=[common], help="MOT metrics of results against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--results", required=True)
    sp.add_argument("--out", help="write scores.json / scores.txt / scores.csv here")

    sp = sub.add_parser("pipeline", parents=[common], help="simulate (optional), register, qa, track, eval")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset", help="existing dataset; otherwise the config's simulation section is used")
    sp.add_argument("--s-sweep", type=_floats, help="also score these association thresholds")
    return p


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_overrides(s_threshold=args.s_threshold, q_threshold=args.q_threshold,
                             shape_mode=args.shape_mode)
    if args.seed is not None:
        from dataclasses import replace
        ransac = replace(cfg.ransac, seed=args.seed)
        sim = replace(cfg.simulation, seed=args.seed) if cfg.simulation else None
        cfg = cfg.with_overrides(ransac=ransac, simulation=sim)
    cfg.__post_init__()
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "simulate":
            sim = cfg.simulation or SimConfig(seed=args.seed or 0)
            out = cmd_simulate(sim, args.out)
            print(f"wrote {sim.sections} sections to {out}")
        elif args.command == "register":
            fitted = cmd_register(sio.load_stack(args.dataset), cfg, args.out, args.jobs)
            print(f"registered {len(fitted)} pairs")
        elif args.command == "qa":
            qa = cmd_qa(sio.load_stack(args.dataset), cfg, args.out, args.jobs)
            print(f"series class {qa.quality.quality.value}; failed pairs "
                  f"{[k for k, f in enumerate(qa.pair_flags) if f]}")
        elif args.command == "track":
            ts = cmd_track(sio.load_stack(args.dataset), cfg, args.out, args.qa, args.assume_good)
            print(f"{len(ts)} tracks")
        elif args.command == "eval":
            score = cmd_eval(args.gt, args.results, cfg, args.out)
            sys.stdout.write(format_table(score))
        elif args.command == "pipeline":
            summary = run_pipeline(cfg, args.out, args.dataset, args.jobs, args.s_sweep, args.assume_good)
            print(f"{summary['tracks']} tracks; series class {summary['series_class']}")
            if "scores" in summary:
                sc = summary["scores"]
                print(f"IDF1 {sc['IDF1']:.1f}  MOTA {sc['MOTA']:.1f}  IDs {sc['IDs']}")
    except sio.MissingInput as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MalformedLine, ConfigError, FrameMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitFailure, RegistrationError, NonConvergent, SingularTransform, InfeasiblePlacement) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InconsistentStack, MissingTransform) as exc:
        print(f"error: inconsistent stack: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
