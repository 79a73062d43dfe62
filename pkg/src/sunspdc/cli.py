"""Command-line entry point: ``sunspdc {simulate,histogram,tomo,chsh,report,pipeline}``.

Exit codes: 0 success, 2 config/validation error, 3 insufficient data, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sunspdc import pipeline
from sunspdc.config import load_config
from sunspdc.errors import ConfigError, InsufficientDataError, InvalidArgumentError, ParseError, PreconditionViolation

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("sunspdc")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (defaults reproduce the reference setup)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--reproducible", action="store_true", help="omit timestamps from reports")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sunspdc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate time-tag streams for every setting")
    h = sub.add_parser("histogram", parents=[common], help="coincidence histograms and count table")
    h.add_argument("run_dir", type=Path, help="directory holding manifest.json and streams/")
    t = sub.add_parser("tomo", parents=[common], help="state tomography from a count table")
    t.add_argument("count_table", type=Path)
    c = sub.add_parser("chsh", parents=[common], help="CHSH test from a count table")
    c.add_argument("count_table", type=Path, nargs="?")
    c.add_argument("--rho", type=Path, help="tomography.json whose state drives the curve predictions")
    r = sub.add_parser("report", parents=[common], help="summary of one or more run directories")
    r.add_argument("run_dirs", type=Path, nargs="+")
    sub.add_parser("pipeline", parents=[common], help="simulate -> histogram -> tomo -> chsh -> report")
    return p


def _out(args, default):
    return args.out if args.out is not None else default


def run(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    if args.command == "simulate":
        m = pipeline.cmd_simulate(cfg, _out(args, Path("run")))
        print(f"simulated {len(m['settings'])} settings -> {2 * len(m['settings'])} stream files")
    elif args.command == "histogram":
        rows = pipeline.cmd_histogram(cfg, args.run_dir, _out(args, args.run_dir))
        for r in rows:
            line = (
                f"{r['setting'][0]},{r['setting'][1]}: window={r['raw']} "
                f"accidental={r['accidental_per_window']:.4g} normalized={r['normalized']:.4g}"
            )
            if r["note"]:
                line += f" ({r['note']})"
            print(line)
    elif args.command == "tomo":
        res = pipeline.cmd_tomo(cfg, args.count_table, _out(args, args.count_table.parent))
        print(
            f"C={res.concurrence.value:.4f}±{res.concurrence.std:.4f} "
            f"P={res.purity.value:.4f}±{res.purity.std:.4f} F={res.fidelity.value:.4f}±{res.fidelity.std:.4f}"
        )
    elif args.command == "chsh":
        if args.count_table is None and cfg.chsh_mode != "exact":
            raise InvalidArgumentError("a count table is required unless chsh.mode is 'exact'")
        default_out = args.count_table.parent if args.count_table is not None else Path(".")
        res = pipeline.cmd_chsh(cfg, args.count_table, _out(args, default_out), rho_path=args.rho)
        print(f"S={res.S.value:.4f}±{res.S.std:.4f} violation={res.violation_sigmas:.2f} sigma")
    elif args.command == "report":
        rep = pipeline.cmd_report(args.run_dirs, args.out, reproducible=args.reproducible)
        print(pipeline.report_markdown(rep), end="")
    elif args.command == "pipeline":
        rep = pipeline.cmd_pipeline(cfg, _out(args, Path("run")), reproducible=args.reproducible)
        print(pipeline.report_markdown(rep), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, InvalidArgumentError, PreconditionViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ParseError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
