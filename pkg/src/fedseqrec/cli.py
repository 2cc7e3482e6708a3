"""Command-line interface.

Verbs:
  run           train an experiment (preset or YAML config) and write a run dir
  sweep         grid over one objective weight
  report        regenerate CSV/Markdown/plots from an existing run dir
  oracle-check  verify the numerical core against closed-form references
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .exceptions import ConfigError
from .experiment import (
    ExperimentConfig,
    emit_report,
    load_config,
    preset,
    run_experiment,
    sweep,
)
from .oracles import run_oracle_checks


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(type(current[0])(x) for x in raw.split(","))
    if isinstance(current, list) or current is None:
        try:
            return [float(x) for x in raw.split(",")]
        except ValueError:
            return raw
    return raw


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply dotted ``path=value`` overrides, e.g. ``train.lr=0.01``."""
    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(f"override {entry!r} is not of the form path=value")
        path, raw = entry.split("=", 1)
        parts = path.split(".")
        target = cfg
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigError(f"no config section {part!r} in {path!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or leaf not in {
            f.name for f in dataclasses.fields(target)
        }:
            raise ConfigError(f"no config field {path!r}")
        setattr(target, leaf, _coerce(getattr(target, leaf), raw))
    return cfg


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset)
    if args.variant:
        cfg.variant = args.variant
    cfg = apply_overrides(cfg, args.set or [])
    cfg.validate()
    return cfg


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--preset", default="desk",
                   help="named preset when no config file is given (default: desk)")
    p.add_argument("--variant", help="override the training variant")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field, e.g. train.lr=0.01 (repeatable)")
    p.add_argument("--output-root", help="directory to create the run dir under "
                   "(default: $FEDSEQREC_OUTPUT_ROOT or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseqrec",
        description="Federated cross-domain sequential recommendation experiments",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train an experiment and write its artifacts")
    _add_config_options(p_run)
    p_run.add_argument("--no-checkpoints", action="store_true",
                       help="skip writing model checkpoints")

    p_sweep = sub.add_parser("sweep", help="grid over one objective weight")
    _add_config_options(p_sweep)
    p_sweep.add_argument("--param", help="weight to sweep (alpha/beta/gamma/lambda_/tau)")
    p_sweep.add_argument("--values", help="comma-separated sweep values")

    p_report = sub.add_parser("report", help="regenerate reports for a run directory")
    p_report.add_argument("run_dir")

    sub.add_parser("oracle-check", help="compare the numerical core against closed forms")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.verb == "run":
            cfg = _config_from_args(args)
            out = run_experiment(cfg, output_root=args.output_root,
                                 write_checkpoints=not args.no_checkpoints)
            print(out["output_dir"])
        elif args.verb == "sweep":
            cfg = _config_from_args(args)
            if args.param:
                cfg.sweep_param = args.param
                cfg.sweep_values = [float(x) for x in (args.values or "").split(",") if x]
            cfg.validate()
            out = sweep(cfg, output_root=args.output_root)
            print(out["output_dir"])
        elif args.verb == "report":
            emit_report(args.run_dir)
            print(args.run_dir)
        elif args.verb == "oracle-check":
            checks, elapsed = run_oracle_checks()
            width = max(len(c.name) for c in checks)
            for c in checks:
                status = "ok  " if c.ok else "FAIL"
                print(f"{status} {c.name:<{width}} expected={c.expected:+.9f} actual={c.actual:+.9f}")
            failed = [c for c in checks if not c.ok]
            print(f"{len(checks) - len(failed)}/{len(checks)} oracle checks passed "
                  f"in {elapsed:.3f}s (tolerance 1e-6)")
            return 1 if failed else 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
