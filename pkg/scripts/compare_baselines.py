"""Federated FedAvg against the centralized (UC) and isolated (NI) baselines on one scenario.

    python scripts/compare_baselines.py --epochs 20 --out results/baselines.csv
"""

import argparse
from pathlib import Path

from fedrul import bench


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise-alpha", type=float, default=0.0)
    ap.add_argument("--out", type=Path, default=Path("results/baselines.csv"))
    args = ap.parse_args()

    config = bench.ExperimentConfig(epochs=args.epochs, seed=args.seed, noise_alpha=args.noise_alpha)
    scenario = bench.build_scenario(config)
    rows = [bench.run_fl(config, scenario).row, bench.run_uc(config, scenario).row]
    rows += bench.run_ni_baseline(config, scenario)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    bench.emit_csv(rows, args.out, timing=True)
    for r in rows:
        engines = "  ".join(f"{e.engine_id} {e.rmse:6.2f}" for e in r.engines)
        print(f"{r.method:14s} RMSE {r.overall_rmse:6.2f}  MAE {r.overall_mae:6.2f}  | {engines}")


if __name__ == "__main__":
    main()
