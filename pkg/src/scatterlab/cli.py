"""``scatterlab`` command line.

Heavy modules are imported inside ``main`` so that ``--threads`` can set the
BLAS thread count before NumPy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

SUBCOMMANDS = {
    "forward": "forward",
    "bench-f1": "F1", "bench-f2": "F2", "bench-f3": "F3", "bench-f4": "F4", "bench-f5": "F5",
    "bench-i1": "I1", "bench-i2": "I2", "bench-i3": "I3", "bench-i4": "I4",
    "rla": "rla", "spectra": "spectra",
}

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scatterlab",
                                description="Point-scatterer forward and inverse solvers with Schwarz preconditioning.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(SUBCOMMANDS) + ["validate-config"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment configuration (JSON)")
        if name != "validate-config":
            sp.add_argument("--out", default="results", help="output directory")
            sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
            sp.add_argument("--threads", type=int, default=None, help="BLAS threads")
        if name == "rla":
            sp.add_argument("--resume-from", type=float, default=None,
                            help="restart at this wavenumber from the saved checkpoints")
    return p


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _set_threads(getattr(args, "threads", None))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .experiments import ExperimentConfig, run_experiment, spectra, write_outputs
    from .scene import ConfigurationError

    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        print(f"ok: {cfg.experiment}")
        return EXIT_OK

    expected = SUBCOMMANDS[args.command]
    if cfg.experiment != expected and not (expected == "rla" and cfg.experiment == "I5"):
        print(f"config error: subcommand {args.command} expects experiment {expected!r}, "
              f"got {cfg.experiment!r}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed

    try:
        if args.command == "spectra":
            os.makedirs(args.out, exist_ok=True)
            result = spectra(cfg)
            path = os.path.join(args.out, "spectra.json")
            with open(path, "w") as fh:
                json.dump(result, fh, indent=2)
                fh.write("\n")
            print(path)
            return EXIT_OK
        kwargs = {}
        if args.command == "rla":
            kwargs = dict(checkpoint_dir=os.path.join(args.out, "checkpoints"),
                          resume_from=args.resume_from)
        table = run_experiment(cfg, **kwargs)
        path = write_outputs(table, cfg, args.out, args.command, threads=args.threads)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MemoryError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
