"""Box pushing: every method over a sampled CF grid, for one or more box environments.

Full study (slow): 52 CFs for ``box``, 12 CFs x 20 samples for the belief variants.

    python scripts/box_batch.py --envs box,box-pomdp,box-unknown,box-all-unknown --out results/box
    python scripts/box_batch.py --envs box-pomdp --horizon 100 --cf-count 4 --samples 5   # desk scale
"""

import argparse
from pathlib import Path

from hybrid_ddp import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--envs", default="box-pomdp")
    ap.add_argument("--methods", default=",".join(harness.METHODS))
    ap.add_argument("--horizon", type=int, default=500)
    ap.add_argument("--max-iters", type=int, default=400)
    ap.add_argument("--cf-count", type=int)
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/box")
    args = ap.parse_args()

    for env in args.envs.split(","):
        over = {"env": env, "methods": args.methods, "horizon": str(args.horizon),
                "max_iterations": str(args.max_iters), "samples": str(args.samples), "seed": str(args.seed),
                "workers": str(args.workers)}
        if args.cf_count is not None:
            over["cf_count"] = str(args.cf_count)
        config = harness.apply_overrides(harness.ExperimentConfig(), over)
        table = harness.run_batch(config, Path(args.out) / env)
        print(f"{env}: {config.n_cf} CFs")
        for a in table.aggregates():
            print(f"  {a.method:12s} mean {a.mean_cost:10.4f}  se {a.standard_error:8.4f}  failures {a.failures}")


if __name__ == "__main__":
    main()
