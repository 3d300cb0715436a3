"""Sweep the noise multiplier across all five aggregation methods.

Writes one results CSV plus a best-model selection-count CSV:

    python scripts/noise_sweep.py --epochs 20 --jobs 4 --out-dir results/
"""

import argparse
from pathlib import Path

from fedrul import bench


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alphas", default="0,0.1,0.5,0.7,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out-dir", type=Path, default=Path("results"))
    args = ap.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    config = bench.ExperimentConfig(epochs=args.epochs, seed=args.seed)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows, counts = bench.noise_sweep(config, alphas, bench.ALL_METHODS, jobs=args.jobs)
    bench.emit_csv(rows, args.out_dir / "noise_sweep.csv", timing=True)
    bench.emit_selection_csv(counts, args.out_dir / "selection_counts.csv")

    print(f"{'alpha':>6} " + " ".join(f"{m:>15}" for m in bench.ALL_METHODS))
    for a in alphas:
        cells = {r.method: r.overall_rmse for r in rows if r.alpha == a}
        print(f"{a:>6g} " + " ".join(f"{cells.get(m, float('nan')):>15.3f}" for m in bench.ALL_METHODS))


if __name__ == "__main__":
    main()
