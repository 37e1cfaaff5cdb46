"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error (message tagged with the failing phase).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging, metrics
from .data import DataError, NormStats, StreamSpec, gen_synthetic_stream, load_csv, write_stream
from .runner import PhaseError, ScenarioConfig, run_scenario, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="citadel", description="Continual anomaly detection lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a continual scenario and write all artifacts")
    run.add_argument("--config", type=Path, help="scenario JSON (schema 1); defaults apply when omitted")
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--seed", type=_seed, help="override the master seed")
    run.add_argument("--no-cl", action="store_true", help="static baseline: train on task 1 only")
    run.add_argument("--mode", choices=("citadel", "static", "ssf_only", "hm_only"))

    gen = sub.add_parser("gen-data", help="write a synthetic drifting stream, one CSV per concept")
    gen.add_argument("--concepts", type=int, default=5)
    gen.add_argument("--samples", type=int, default=400, help="normal samples per concept")
    gen.add_argument("--dim", type=int, default=8)
    gen.add_argument("--seed", type=_seed, default=7)
    gen.add_argument("--drift", type=float, default=1.5)
    gen.add_argument("--offset", type=float, default=6.0)
    gen.add_argument("--out", type=Path, required=True)

    met = sub.add_parser("metrics", help="lifelong metrics of a result matrix CSV")
    met.add_argument("--matrix", type=Path, required=True)

    tr = sub.add_parser("transform", help="dump samples of a CSV as PGM images using a run's frozen layout")
    tr.add_argument("--run", type=Path, required=True, help="output directory of a previous run")
    tr.add_argument("--csv", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--limit", type=int, default=16)
    tr.add_argument("--label-column", default="label")

    mem = sub.add_parser("inspect-memory", help="summarize the memory audit of a run")
    mem.add_argument("--run", type=Path, required=True)
    mem.add_argument("--task", type=int, help="only this task (1-based)")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise PhaseError("config", exc) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_cl:
        cfg.mode = "static"
    elif args.mode:
        cfg.mode = args.mode
    report = run_scenario(cfg)
    write_outputs(report, args.out)
    print(json.dumps(report.metrics, sort_keys=True))
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace) -> int:
    try:
        spec = StreamSpec(args.concepts, args.samples, args.dim, args.drift, args.offset, args.seed)
        paths = write_stream(gen_synthetic_stream(spec), args.out)
    except (DataError, OSError) as exc:
        raise PhaseError("gen-data", exc) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_metrics(args: argparse.Namespace) -> int:
    try:
        R = metrics.read_matrix(args.matrix)
        out = metrics.summary(R)
    except (OSError, ValueError) as exc:
        raise PhaseError("metrics", exc) from exc
    print(json.dumps({k: out[k] for k in ("ll_pr_auc", "bwt", "fwt")}, sort_keys=True))
    return EXIT_OK


def _cmd_transform(args: argparse.Namespace) -> int:
    try:
        layout = imaging.FeatureLayout.from_json((args.run / "layout.json").read_text(encoding="utf-8"))
        pre = json.loads((args.run / "preprocess.json").read_text(encoding="utf-8"))
        ds = load_csv(args.csv, args.label_column)
        if list(ds.feature_names) != pre["feature_names"]:
            raise DataError("CSV columns differ from the run's feature names")
        X = NormStats.from_dict(pre["norm"]).apply(ds.samples)[:, np.array(pre["selected"], dtype=np.int64)]
        images = imaging.to_images(X[: max(args.limit, 0)], layout)
        args.out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            path = args.out / f"sample_{i:05d}_label{int(ds.labels[i])}.pgm"
            imaging.write_pgm(img, path)
            print(path)
    except (OSError, ValueError, KeyError) as exc:
        raise PhaseError("transform", exc) from exc
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    try:
        files = sorted((args.run / "memory_audit").glob("task*.json"), key=lambda p: int(p.stem[4:]))
        if not files:
            raise DataError(f"no memory audits under {args.run}")
        if args.task is not None:
            files = [p for p in files if int(p.stem[4:]) == args.task]
            if not files:
                raise DataError(f"no audit for task {args.task}")
        for path in files:
            audit = json.loads(path.read_text(encoding="utf-8"))
            print(f"{path.stem}: {audit['total']}/{audit['capacity']} entries")
            for level in audit["levels"]:
                if not level["size"]:
                    continue
                parts = ", ".join(
                    f"t{b['task']}{'*' if b['marked'] else ''}={b['count']}" for b in level["buffers"]
                )
                print(f"  L{level['level']:<2} {level['size']:>5}/{level['allocation']:<5} {parts}")
    except (OSError, ValueError, KeyError) as exc:
        raise PhaseError("inspect-memory", exc) from exc
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "gen-data": _cmd_gen,
    "metrics": _cmd_metrics,
    "transform": _cmd_transform,
    "inspect-memory": _cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except PhaseError as exc:
        print(f"citadel: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
