"""``mfggp <mode> --config <path> [--out <dir>] [--seed <int>] [--threads <n>]``

Exit status: 0 on success, 1 on a validation error, 2 on a solver failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import config as _config
from .config import MODES, ConfigError
from .gram import FactorizationError
from .pipeline import (
    RECORD_VERSION,
    l2_gauge_error,
    l2_grid_error,
    run_forward,
    run_invert,
    run_study,
    run_tdinvert,
    write_record,
)
from .solver import SolverError

__all__ = ["main", "run", "l2_grid_error", "l2_gauge_error"]

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 1, 2
log = logging.getLogger("mfggp")


def run(cfg: dict, out: str | None = None, seed: int | None = None, threads: int = 1) -> dict:
    """Execute a validated config; returns the result record."""
    mode = cfg["mode"]
    if seed is not None:
        cfg = dict(cfg, seeds=[int(seed)])
    s = cfg["seeds"][0]
    if mode == "forward":
        rec = run_forward(cfg, out)
    elif mode == "invert":
        rec = run_invert(cfg, s, out)
    elif mode == "tdinvert":
        rec = run_tdinvert(cfg, s, out)
    else:
        rec = run_study(cfg, out, threads)
    rec["record_version"] = RECORD_VERSION
    rec["status"] = "ok"
    rec["config"] = cfg
    return rec


class _Parser(argparse.ArgumentParser):
    # bad arguments are validation errors, not argparse's default status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfggp", description="Gaussian-process recovery of mean field games.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", default=None, help="output directory (default: ./mfggp-out/<mode>)")
    p.add_argument("--seed", type=int, default=None, help="override the config's seeds with one seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for study mode")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = args.out or os.path.join("mfggp-out", args.mode)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        cfg = _config.load(args.config)
        if cfg["mode"] != args.mode:
            raise ConfigError("mode", f"config is for mode {cfg['mode']!r} but {args.mode!r} was requested")
    except ConfigError as exc:
        print(f"mfggp: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    try:
        rec = run(cfg, out, args.seed, args.threads)
    except ConfigError as exc:
        print(f"mfggp: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        partial = {
            "record_version": RECORD_VERSION,
            "mode": args.mode,
            "status": "failed",
            "error": str(exc),
            "config": cfg,
            "timing": {"wall_clock_seconds": time.perf_counter() - t0},
        }
        diag = getattr(exc, "diagnostics", None)
        if diag is not None:
            partial["diagnostics"] = diag.to_dict()
            partial["failed_iteration"] = getattr(exc, "iteration", None)
        if isinstance(exc, FactorizationError):
            partial["failing_pivot"] = exc.pivot
        write_record(os.path.join(out, "record.json"), partial)
        print(f"mfggp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_record(os.path.join(out, "record.json"), rec)
    print(os.path.join(out, "record.json"))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
