"""Command-line driver: simulate, build-library, localize, evaluate, report.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigError, DuplicateFrameId, EmptyInput, IoError, LengthMismatch, SemvoError
from .io import read_json
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("semvo")


def _setup_logging() -> None:
    name = os.environ.get("SEMVO_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"SEMVO_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args, dataset_dir=None) -> RunConfig:
    """--config if given, else the config recorded in the dataset manifest, else defaults; --seed overrides."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif dataset_dir is not None and (Path(dataset_dir) / "manifest.json").exists():
        cfg = config_from_dict(read_json(Path(dataset_dir) / "manifest.json")["config"])
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _strip_ids(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(
        cfg,
        mapping=dataclasses.replace(cfg.mapping, strip_track_ids=True),
        drive=dataclasses.replace(cfg.drive, strip_track_ids=True),
    )


def run_simulate(args) -> None:
    cfg = _config(args)
    if args.strip_track_ids:
        cfg = _strip_ids(cfg)
    m = pipeline.cmd_simulate(cfg, args.out)
    print(f"wrote {m['frames']['mapping']} mapping and {m['frames']['drive']} drive frames to {args.out}")


def run_build_library(args) -> None:
    cfg = _config(args, args.dataset)
    lib = pipeline.cmd_build_library(args.dataset, args.out, cfg)
    print(f"library of {len(lib)} frames written to {args.out}")


def run_localize(args) -> None:
    cfg = _config(args, args.dataset)
    res = pipeline.cmd_localize(args.dataset, args.library, cfg, args.out)
    print(f"{len(res.poses)} poses, {res.n_anchors} anchors, {res.n_reinit} reinitializations written to {args.out}")


def run_evaluate(args) -> None:
    cfg = _config(args, args.dataset)
    loc = Path(args.localized)
    before = loc / "reported_elements_before.jsonl" if args.before_after else None
    traj = loc / "corrected_trajectory.csv"
    summary = pipeline.cmd_evaluate(
        loc / "reported_elements.jsonl", args.dataset, cfg, args.out, before, traj if traj.exists() else None
    )
    print((Path(args.out) / "metrics.txt").read_text(encoding="utf-8"), end="")
    if "trajectory" in summary:
        t = summary["trajectory"]
        print(f"ATE corrected {t['corrected']['rmse_m']:.3f} m, INS {t['ins']['rmse_m']:.3f} m")


def run_report(args) -> None:
    cfg = _config(args)
    if args.strip_track_ids:
        cfg = _strip_ids(cfg)
    summary = pipeline.cmd_report(cfg, args.out, args.before_after)
    print((Path(args.out) / "evaluation" / "metrics.txt").read_text(encoding="utf-8"), end="")
    t = summary["trajectory"]
    print(f"ATE corrected {t['corrected']['rmse_m']:.3f} m, INS {t['ins']['rmse_m']:.3f} m")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")

    p = argparse.ArgumentParser(prog="semvo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a mapping and a drive pass")
    s.add_argument("--out", type=Path, required=True, help="dataset directory")
    s.add_argument("--strip-track-ids", action="store_true", help="drop element ids from detections")
    s.set_defaults(func=run_simulate)

    s = sub.add_parser("build-library", parents=[common], help="element-frame library from the mapping pass")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True, help="library file (JSON lines)")
    s.set_defaults(func=run_build_library)

    s = sub.add_parser("localize", parents=[common], help="correct the drive pass against a library")
    s.add_argument("dataset", type=Path)
    s.add_argument("--library", type=Path, help="library file; omit to run without anchors")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=run_localize)

    s = sub.add_parser("evaluate", parents=[common], help="element and trajectory metrics")
    s.add_argument("dataset", type=Path)
    s.add_argument("localized", type=Path, help="output directory of localize")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--before-after", action="store_true", help="also score the uncorrected elements")
    s.set_defaults(func=run_evaluate)

    s = sub.add_parser("report", parents=[common], help="simulate, build, localize and evaluate in one go")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--before-after", action="store_true")
    s.add_argument("--strip-track-ids", action="store_true")
    s.set_defaults(func=run_report)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (IoError, EmptyInput, DuplicateFrameId, LengthMismatch, OSError)):
        return EXIT_IO
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        args.func(args)
    except (SemvoError, OSError) as exc:
        print(f"semvo: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (ArithmeticError, ValueError) as exc:
        # malformed numbers in otherwise readable input files
        print(f"semvo: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
