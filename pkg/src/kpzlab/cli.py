"""Command-line surface for experiment runs and identity checks.

    kpzlab run <config.json> [--workers N] [--seed S] [--output-dir D]
    kpzlab identity-suite <config.json> [...]
    kpzlab fit --input sweep.csv --estimator var_h0
    kpzlab version

Exit codes: 0 success (and, for identity-suite, all checks passing),
1 failing checks, 2 config validation error, 3 buffer-rule violation,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import __version__
from .experiments import (
    BufferRuleError,
    ConfigError,
    ExperimentConfig,
    run_and_persist,
)
from .stats import fit_exponent

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_BUFFER = 3
EXIT_IO = 4


def _load_config(args, force_kind: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if force_kind is not None and cfg.kind != force_kind:
        raise ConfigError(f"config kind {cfg.kind!r}; this command requires {force_kind!r}")
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    elif os.environ.get("KPZLAB_OUTPUT_DIR") and cfg.output_dir == ".":
        cfg.output_dir = os.environ["KPZLAB_OUTPUT_DIR"]
    cfg.validate()
    return cfg


def _cmd_run(args, force_kind=None) -> int:
    try:
        cfg = _load_config(args, force_kind)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res, manifest = run_and_persist(cfg)
    except BufferRuleError as exc:
        print(f"buffer rule violation: {exc}", file=sys.stderr)
        return EXIT_BUFFER
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    n_fail = sum(1 for r in res.checks if not r.passed)
    for rec in res.checks:
        status = "pass" if rec.passed else "FAIL"
        print(f"[{status}] {rec.check_name}: lhs={rec.lhs:.6g} rhs={rec.rhs:.6g} "
              f"z={rec.z_score:.3g}")
    for entry in res.skipped:
        print(f"[skip] {entry['check_name']}: {entry['reason']}")
    print(f"outputs -> {cfg.output_dir} (config {manifest['config_hash'][:12]})")
    if cfg.kind == "identity-suite":
        return EXIT_OK if n_fail == 0 else EXIT_CHECKS_FAILED
    return EXIT_OK if n_fail == 0 else EXIT_CHECKS_FAILED


def _cmd_fit(args) -> int:
    path = Path(args.input)
    if not path.exists():
        print(f"i/o failure: no such file {path}", file=sys.stderr)
        return EXIT_IO
    points = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            if row["estimator"] != args.estimator or not row["t_macro"]:
                continue
            points.append((float(row["t_macro"]), float(row["value"]), float(row["stderr"])))
    if len(points) < 3:
        print(f"config error: fewer than 3 rows for estimator {args.estimator!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    fit = fit_exponent(points, weighted=args.weighted)
    print(f"estimator={args.estimator} slope={fit.slope!r} "
          f"stderr={fit.slope_stderr!r} r2={fit.r_squared!r} "
          f"t_range=[{fit.t_range[0]:g},{fit.t_range[1]:g}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpzlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, kind in (("run", None), ("identity-suite", "identity-suite")):
        p = sub.add_parser(name, help=f"{name} an experiment config")
        p.add_argument("config", help="path to the experiment JSON config")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.set_defaults(func=lambda a, k=kind: _cmd_run(a, force_kind=k))

    p = sub.add_parser("fit", help="log-log exponent fit over sweep CSV rows")
    p.add_argument("--input", required=True)
    p.add_argument("--estimator", required=True)
    p.add_argument("--weighted", action="store_true")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("version", help="print the tool version")
    p.set_defaults(func=lambda a: (print(f"kpzlab {__version__}"), EXIT_OK)[1])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
