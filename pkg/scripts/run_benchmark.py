"""Synthetic hourly-load benchmark: CG, CGMM, CANF and iterative ARMA across seeds.

    python3 scripts/run_benchmark.py --out runs/bench --seeds 0 1

Writes bundles, per-seed metrics, a summary table and directional checks under ``--out``.
"""

import argparse
import json
import logging
import time

from canf.experiments import BenchmarkConfig, run_benchmark
from canf.forecasters import STRATEGIES


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/bench")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(BenchmarkConfig.strategies))
    p.add_argument("--weeks", type=int, default=BenchmarkConfig.weeks)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    t0 = time.perf_counter()
    cfg = BenchmarkConfig(seeds=tuple(args.seeds), strategies=tuple(args.strategies), weeks=args.weeks)
    report = run_benchmark(cfg, args.out)
    print(json.dumps({"checks": report["checks"], "summary": report["summary"]}, indent=2))
    print(f"elapsed {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
