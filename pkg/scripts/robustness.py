"""Noisy-client robustness at one noise level: softmax weights, best-model picks and test RMSE.

Also scores each model on test engines normalized with the clean clients' ranges
only, to separate the aggregation effect from the range widening that the noisy
clients cause in the pooled normalization.

    python scripts/robustness.py --alpha 2 --epochs 20
"""

import argparse

import numpy as np

from fedrul import bench
from fedrul.dataprep import NormalizationStats


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=2.0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = bench.ExperimentConfig(epochs=args.epochs, seed=args.seed, noise_alpha=args.alpha)
    scenario = bench.build_scenario(config)
    noisy = set(config.noisy_client_ids)
    clean_stats = NormalizationStats.pooled(d.stats for d in scenario.datasets if d.client_id not in noisy)
    spec = config.network(scenario.n_channels)

    for method in bench.ALL_METHODS:
        cfg = bench.replace(config, method=method)
        out = bench.run_fl(cfg, scenario)
        _, clean_rmse, _ = bench.evaluate_test_engines(spec, out.best_params, scenario.test_flights, clean_stats, cfg.stride)
        line = f"{method:15s} RMSE {out.row.overall_rmse:7.3f} (clean-range test {clean_rmse:7.3f})"
        history = out.state.history
        if method.endswith("softmax"):
            w = np.array([[r.weights[c] for c in out.state.client_ids] for r in history]).mean(axis=0)
            line += "  mean weights " + " ".join(f"{x:.3f}" for x in w)
        if method.endswith("best"):
            picks = [r.selected for r in history]
            line += "  picks " + " ".join(f"{c}:{picks.count(c)}" for c in out.state.client_ids)
        print(line, flush=True)


if __name__ == "__main__":
    main()
