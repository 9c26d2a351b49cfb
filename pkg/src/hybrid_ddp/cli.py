"""Command-line entry point: ``run``, ``batch`` and ``export`` subcommands."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness

_FLAG_KEYS = {"env": "env", "method": "method", "horizon": "horizon", "max_iters": "max_iterations",
              "seed": "seed", "cf_count": "cf_count", "samples": "samples", "out": "out", "workers": "workers"}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--env", choices=harness.ENVIRONMENTS)
    common.add_argument("--method", choices=harness.METHODS)
    common.add_argument("--methods", help="comma-separated method list (batch)")
    common.add_argument("--horizon", type=int)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--cf-count", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. car.dt=0.15")

    p = argparse.ArgumentParser(prog="hybrid-ddp", description="Hybrid-control trajectory optimization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="optimize and evaluate one method on one CF")
    run.add_argument("--cf-index", type=int, default=0)
    sub.add_parser("batch", parents=[common], help="all methods over the CF grid; writes results.csv")
    exp = sub.add_parser("export", parents=[common], help="write the executed trajectory of one run as CSV")
    exp.add_argument("--cf-index", type=int, default=0)
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def build_config(args) -> harness.ExperimentConfig:
    config = harness.ExperimentConfig()
    if args.config:
        config = harness.load_config(args.config, config)
    pairs = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = str(value)
    if args.methods:
        pairs["methods"] = args.methods
    for item in args.set:
        if "=" not in item:
            raise harness.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k] = v
    return harness.apply_overrides(config, pairs)


def _row_line(row) -> str:
    status = "converged" if row.converged else "not converged"
    line = (f"{row.environment} {row.method} cf={row.cf_index} cost={row.total_cost:.6g} "
            f"iterations={row.iterations} ({status}) time={row.wall_time:.1f}s")
    return line + (f" error={row.error}" if row.error else "")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "config":
            sys.stdout.write(harness.config_to_text(config))
            return 0
        if args.command == "batch":
            table = harness.run_batch(config, config.out)
            for a in table.aggregates():
                print(f"{a.environment} {a.method} mean={a.mean_cost:.6g} se={a.standard_error:.3g} "
                      f"n={a.n} failures={a.failures}")
            print(f"wrote {Path(config.out) / 'results.csv'}")
            return 0
        if not 0 <= args.cf_index < config.n_cf:
            raise harness.ConfigError(f"cf index {args.cf_index} outside 0..{config.n_cf - 1}")
        out = harness.run_single(config, args.cf_index)
        print(_row_line(out.row))
        if args.command == "export":
            if out.record is None:
                raise RuntimeError(f"no trajectory to export: {out.row.error}")
            path = Path(config.out)
            if path.suffix != ".csv":
                path.mkdir(parents=True, exist_ok=True)
                path = path / f"{config.env}_{out.row.method}_cf{args.cf_index}.csv"
            setup = harness.build_setup(config, harness.cf_grid(config)[args.cf_index])
            harness.export_trajectory(out.record, path, setup.hybrid.names, out.probabilities)
            print(f"wrote {path}")
        return 1 if out.row.error else 0
    except (harness.ConfigError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
