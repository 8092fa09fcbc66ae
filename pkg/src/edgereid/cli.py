"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 validation, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .embedsim import ParseError, ValidationError
from .metrics import (
    EmptyProbeSet,
    NonpositivePower,
    ae_coverage,
    ae_mark,
    cmc,
    efficiency,
    id_measures,
    mean_average_precision,
    read_measurements,
    read_samples,
    read_tracks,
)
from .simulation import ConfigError, load_run_config, run_sim

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_INVARIANT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgereid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate a scenario and score it")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, help="output directory (overrides the config)")
    run.add_argument("--format", help="comma-separated subset of csv,json,svg")
    run.add_argument("--audit-privacy", action="store_true", help="decode and check every byte sent")
    run.add_argument("--self-test-latency", action="store_true", help="rerun at latency 0 and 1e6 and compare")

    met = sub.add_parser("metrics", help="IDP/IDR/IDF1 between two track files")
    met.add_argument("--truth", required=True, type=Path)
    met.add_argument("--hyp", required=True, type=Path)
    met.add_argument("--iou", type=float, default=0.3)
    met.add_argument("--per-camera", action="store_true")

    reid = sub.add_parser("reid-eval", help="CMC and mAP for gallery/query feature files")
    reid.add_argument("--gallery", required=True, type=Path)
    reid.add_argument("--query", required=True, type=Path)
    reid.add_argument("--rank", type=int, action="append", help="CMC rank (repeatable; default 1 and 5)")
    reid.add_argument("--exclude-same-camera", action="store_true")

    ae = sub.add_parser("ae", help="accuracy-efficiency mark and coverage")
    ae.add_argument("--fps", required=True, type=float)
    ae.add_argument("--watts", required=True, type=float)
    ae.add_argument("--accuracy", required=True, type=float, help="IDF1 in percent")
    ae.add_argument("--coverage", type=Path, help="file of 'component <name> <value> <bound> <max|min>' lines")
    return parser


def _print(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    from .report import emit_report, report_json

    config = load_run_config(args.config)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.format:
        overrides["formats"] = tuple(f.strip() for f in args.format.split(",") if f.strip())
    if args.audit_privacy:
        overrides["audit_privacy"] = True
    if args.self_test_latency:
        overrides["self_test_latency"] = True
    config = replace(config, **overrides)
    unknown = set(config.formats) - {"csv", "json", "svg"}
    if unknown:
        raise ConfigError(f"unknown report format(s): {', '.join(sorted(unknown))}")

    report = run_sim(config)
    if config.out_dir is not None:
        for path in emit_report(report, config.out_dir, config.formats):
            logging.getLogger(__name__).info("wrote %s", path)
    sys.stdout.write(report_json(report))
    return EXIT_INVARIANT if report.invariant_violations else EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    truth = read_tracks(args.truth)
    hyp = read_tracks(args.hyp)
    out = {"all": id_measures(truth, hyp, args.iou).as_dict()}
    if args.per_camera:
        for cam in sorted(set(truth.cameras) | set(hyp.cameras)):
            out[f"camera {cam}"] = id_measures(truth.restrict(cam), hyp.restrict(cam), args.iou).as_dict()
    _print(out)
    return EXIT_OK


def cmd_reid(args: argparse.Namespace) -> int:
    gallery = read_samples(args.gallery)
    queries = read_samples(args.query)
    ranks = args.rank or [1, 5]
    out = {f"cmc@{r}": cmc(gallery, queries, r, args.exclude_same_camera) for r in ranks}
    out["mAP"] = mean_average_precision(gallery, queries, args.exclude_same_camera)
    _print(out)
    return EXIT_OK


def cmd_ae(args: argparse.Namespace) -> int:
    eff = efficiency(args.fps, args.watts)
    out = {"efficiency": eff, "mark": ae_mark(args.accuracy, eff)}
    if args.coverage:
        components = read_measurements(args.coverage).components or []
        out["coverage"] = ae_coverage(components)
    _print(out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "metrics": cmd_metrics, "reid-eval": cmd_reid, "ae": cmd_ae}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"edgereid: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParseError, ValidationError, EmptyProbeSet, NonpositivePower, ValueError) as exc:
        print(f"edgereid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
