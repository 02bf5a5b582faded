"""Command-line entry point: ``xtkd <command>``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .audits import bound_audit, grad_audit
from .exceptions import ConfigError, XtkdError
from .harness import check_preset, parse_config, preset_config, preset_list, resolve_out_dir, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_CLAIM = 0, 1, 2, 3


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xtkd", description="Cross-task feature distillation laboratory.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config file")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", default=None)

    pre = sub.add_parser("preset", help="run a named preset")
    pre.add_argument("name", help=", ".join(preset_list()))
    pre.add_argument("--seeds", type=_seed_list, default=None)
    pre.add_argument("--jobs", type=int, default=1)
    pre.add_argument("--out", default=None)
    pre.add_argument("--n", type=int, default=200, help="instances (bound-audit only)")
    pre.add_argument("--tol", type=float, default=1e-6, help="retained-set tolerance (bound-audit only)")

    ba = sub.add_parser("bound-audit", help="check the decoupled bound on random instances")
    ba.add_argument("--n", type=int, default=200)
    ba.add_argument("--tol", type=float, default=1e-6)
    ba.add_argument("--seed", type=int, default=0)

    ga = sub.add_parser("grad-audit", help="finite-difference check of every op and loss")
    ga.add_argument("--seeds", type=int, default=20)

    sub.add_parser("version", help="print the package version")
    return ap


def _report_claims(name, table, out) -> int:
    claims = check_preset(name, table, out)
    for c in claims:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  ({c.detail})")
    return EXIT_OK if all(c.passed for c in claims) else EXIT_CLAIM


def _bound_audit(n: int, tol: float, seed: int = 0) -> int:
    audit = bound_audit(n, tol, seed)
    print(f"instances {len(audit.reports)}  holds {audit.n_holds}  min slack {audit.min_slack:.3e}")
    return EXIT_OK if audit.n_holds == len(audit.reports) else EXIT_CLAIM


def _grad_audit(seeds: int) -> int:
    rows = grad_audit(seeds)
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<18} max rel err {r.max_rel_err:.2e}  (tol {r.tol:g})")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CLAIM


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "version":
            print(__version__)
            return EXIT_OK
        if args.command == "grad-audit":
            return _grad_audit(args.seeds)
        if args.command == "bound-audit":
            return _bound_audit(args.n, args.tol, args.seed)
        if args.command == "run":
            cfg = parse_config(args.config)
            out = resolve_out_dir(cfg, args.out)
            table = run_experiment(cfg, jobs=args.jobs, out_dir=out)
            print(table.to_csv(), end="")
            return EXIT_OK
        if args.name == "bound-audit":
            return _bound_audit(args.n, args.tol)
        cfg = preset_config(args.name, seeds=args.seeds)
        out = resolve_out_dir(cfg, args.out)
        table = run_experiment(cfg, jobs=args.jobs, out_dir=out)
        print(f"wrote {out}")
        return _report_claims(args.name, table, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except XtkdError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
