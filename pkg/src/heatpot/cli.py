"""Command line driver.

``heatpot run <config> [--out DIR] [--workers N] [--snapshot-every K] [--plot]``
``heatpot verify``

Exit status: 0 on success, 2 on configuration errors, 3 on numerical
failures.
"""

import argparse
import logging
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("heatpot")


def _limit_threads(n):
    # must run before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser():
    p = argparse.ArgumentParser(prog="heatpot", description="Heat potential experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--workers", type=int, help="threads for the numerical kernels")
    r.add_argument("--snapshot-every", type=int, dest="snapshot_every",
                   help="write grid snapshots every K steps")
    r.add_argument("--plot", action="store_true", help="render figures (needs matplotlib)")
    v = sub.add_parser("verify", help="run the built-in oracle and property checks")
    v.add_argument("--seed", type=int, default=0)
    return p


def _run(args):
    from dataclasses import replace

    from .errors import ConfigError, InvalidArgument
    from .experiments import load_config, run_experiment, validate

    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = replace(cfg, out=args.out)
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        if args.snapshot_every is not None:
            cfg = replace(cfg, snapshot_every=args.snapshot_every)
        cfg = validate(cfg)
        if args.plot:
            from .plotting import require_matplotlib
            require_matplotlib()
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.out or os.path.join("runs", cfg.experiment)
    try:
        summary = run_experiment(cfg, out)
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.plot:
        from .plotting import plot_experiment
        plot_experiment(cfg.experiment, out)
    for k, v in summary.items():
        if not isinstance(v, (dict, list)):
            print(f"{k} = {v}")
    print(f"outputs in {out}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        workers = None
        if args.workers is not None:
            workers = args.workers
        if workers is None:
            # peek at the config for a worker count; parse errors surface later
            try:
                with open(args.config) as fh:
                    for line in fh:
                        key, _, val = line.split("#", 1)[0].partition("=")
                        if key.strip() == "workers":
                            workers = int(val)
            except (OSError, ValueError):
                pass
        if workers is not None and workers >= 1:
            _limit_threads(workers)
        return _run(args)
    from .verify import run_checks
    return EXIT_OK if run_checks(seed=args.seed) else EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
