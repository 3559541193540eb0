"""Command-line entry point: ``dare-lab <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dare_lab.errors import ConfigError, DareLabError
from dare_lab.harness.artifacts import verify_manifest, write_json
from dare_lab.harness.config import config_from_dict, load_config
from dare_lab.harness.loop import RunError, run_bound_check, run_estimator_bench, run_train
from dare_lab.harness.presets import PRESETS, preset

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

log = logging.getLogger("dare_lab")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="path to a JSON experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory (overrides run.output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dare-lab", description="Difficulty-adaptive RL toy lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="{train,bench-estimators,bound-check,report}")
    sub.required = True
    for name, text in (
        ("train", "run the training loop"),
        ("bench-estimators", "compare difficulty estimators along one training run"),
        ("bound-check", "validate the finite-sample SNIS error bound"),
    ):
        _add_run_args(sub.add_parser(name, help=text))
    rep = sub.add_parser("report", help="print the summary of a finished run")
    rep.add_argument("run_dir")
    return parser


def _load(args):
    if args.config:
        return load_config(args.config, seed=args.seed)
    data = preset(args.preset) if args.preset else {}
    if args.seed is not None:
        data.setdefault("run", {})["seed"] = int(args.seed)
    return config_from_dict(data)


def _report(run_dir: str) -> int:
    d = Path(run_dir)
    summary = d / "summary.json"
    if not summary.is_file():
        print(f"dare-lab: no summary.json in {d}", file=sys.stderr)
        return EXIT_RUNTIME
    if (d / "manifest.json").is_file() and not verify_manifest(d):
        print(f"dare-lab: manifest hashes do not match files in {d}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary.read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return _report(args.run_dir)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"dare-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        cfg.run.output_dir = args.out
    runner = {"train": run_train, "bench-estimators": run_estimator_bench, "bound-check": run_bound_check}[args.command]
    try:
        report = runner(cfg)
    except RunError as exc:
        doc = exc.report()
        print(json.dumps({k: v for k, v in doc.items() if k != "traceback"}), file=sys.stderr)
        if cfg.run.output_dir:
            out = Path(cfg.run.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", doc)
        return EXIT_RUNTIME
    except DareLabError as exc:
        print(f"dare-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if report.out_dir is not None:
        log.info("wrote %s", report.out_dir)
    print(json.dumps({k: v for k, v in report.summary.items() if k not in ("curve",)}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
