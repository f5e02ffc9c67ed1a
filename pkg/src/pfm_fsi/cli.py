"""Command line entry point: ``simulate``, ``scenarios list``, ``diff-trace``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, SimulationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DIFF = 1


def _threads():
    n = os.environ.get("PFM_FSI_THREADS")
    if not n:
        return
    import numba
    try:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        raise ConfigError("PFM_FSI_THREADS", f"not an integer: {n!r}") from None


def _simulate(args):
    from .config import load_config, validate
    from .driver import run

    cfg = load_config(args.config)
    if args.frames is not None:
        cfg.frames = args.frames
    if args.method is not None:
        cfg.method = args.method
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output is not None:
        cfg.output.directory = args.output
    if args.dump_grids:
        cfg.output.dump_grids = True
    validate(cfg)
    _threads()
    sim = run(cfg)
    print(f"{cfg.scenario}: {cfg.frames} frames, t = {sim.t:.4f}, steps = {sim.steps}, "
          f"output in {cfg.output.directory}")
    return EXIT_OK


def _scenarios(args):
    from .scenarios import CATALOG

    for name in sorted(CATALOG):
        s = CATALOG[name]
        print(f"{name:26s} {s.backend:5s} {s.nx}x{s.ny}  {s.summary}")
    return EXIT_OK


def _diff(args):
    from .diagnostics import diff_traces

    d = diff_traces(args.a, args.b, args.tol)
    if d is None:
        print("traces differ in shape or columns")
        return EXIT_DIFF
    ok = d <= args.tol
    print(f"max abs difference {d:.3e} ({'within' if ok else 'exceeds'} tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_DIFF


def build_parser():
    from .config import METHODS

    ap = argparse.ArgumentParser(prog="pfm-fsi", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario from a TOML config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--frames", type=int)
    sim.add_argument("--output")
    sim.add_argument("--method", choices=METHODS)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--dump-grids", action="store_true")
    sim.set_defaults(fn=_simulate)

    sc = sub.add_parser("scenarios", help="list built-in scenarios")
    sc.add_argument("action", choices=["list"])
    sc.set_defaults(fn=_scenarios)

    df = sub.add_parser("diff-trace", help="compare two trace.csv files")
    df.add_argument("a")
    df.add_argument("b")
    df.add_argument("--tol", type=float, default=0.0)
    df.set_defaults(fn=_diff)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
