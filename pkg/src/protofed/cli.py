"""Command line entry point: ``protofed run | sweep | verify``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, apply_overrides, dump_config, load_config
from .errors import ConfigError, ProtoFedError
from .federation import MODES, run_federation
from .metrics import emit_metrics


def _config_keys() -> list[str]:
    keys = []
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("attack", "dataset"):
            sub = f.default_factory()
            keys += [f"{f.name}.{g.name}" for g in dataclasses.fields(sub)]
        elif f.name != "seed":
            keys.append(f.name)
    return keys


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment file")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--out-dir", default=os.environ.get("PROTOFED_OUT"),
                   help="output directory (default: $PROTOFED_OUT)")
    over = p.add_argument_group("config overrides")
    for key in _config_keys():
        over.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofed",
                                     description="Prototype-based federated learning with encrypted robust aggregation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write CSV outputs")
    _add_common(run)
    run.add_argument("--mode", choices=MODES, default="ppfpl")

    sw = sub.add_parser("sweep", help="grid over attack fraction, Avg, Std, chi and lambda")
    _add_common(sw)
    for short in harness.SWEEP_KEYS:
        sw.add_argument(f"--{short}-grid", dest=f"grid:{short}", metavar="V1,V2,...",
                        help=f"comma-separated values for {harness.SWEEP_KEYS[short]}")
    sw.add_argument("--modes", default="ppfpl", help="comma-separated modes")

    ver = sub.add_parser("verify", help="run the acceptance checks")
    ver.add_argument("--only", default="", help="comma-separated check numbers (default: all)")
    ver.add_argument("--quick", action="store_true", help="only the fast checks")
    ver.add_argument("--json", dest="json_out", help="also write results to this JSON file")
    return parser


def _load(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = ExperimentConfig()
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items()
                 if k.startswith("set:") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides)


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigError("no output directory: pass --out-dir or set PROTOFED_OUT")
    return Path(args.out_dir)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    fed = run_federation(cfg, args.mode)
    paths = emit_metrics(fed.metrics, out)
    (out / "config.toml").write_text(dump_config(cfg))
    print(f"mode={args.mode} final benign accuracy {fed.metrics.final_accuracy(harness.FINAL_WINDOW):.4f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    grid = {k.split(":", 1)[1]: [float(x) for x in v.split(",") if x.strip()]
            for k, v in vars(args).items() if k.startswith("grid:") and v}
    if not grid:
        raise ConfigError("sweep needs at least one --<name>-grid")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    rows = harness.sweep(cfg, grid, modes, out)
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_verify(args) -> int:
    if args.quick:
        select = harness.QUICK
    elif args.only:
        select = {int(x) for x in args.only.split(",")}
    else:
        select = None
    results = harness.run_checks(select)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(harness.result_rows(results), indent=2))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"protofed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"protofed: {exc}", file=sys.stderr)
        return 1
    except ProtoFedError as exc:
        print(f"protofed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
