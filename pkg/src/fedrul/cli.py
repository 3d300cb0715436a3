"""``fedrul`` command line: FL runs, UC / NI baselines, noise sweeps, data generation and ingestion.

Every subcommand exits 0 on success. On failure it exits nonzero and writes a
single JSON line ``{"error": <kind>, "message": <text>}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fedrul import bench
from fedrul.aggregation import AggregationMethod
from fedrul.dataprep import csv_emit, csv_ingest, group_by_engine
from fedrul.runtime import serve_client
from fedrul.synth import SynthProfile, synth_generate

log = logging.getLogger("fedrul")


def _ids(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--clients", type=int, default=6, help="number of training clients")
    g.add_argument("--test-engines", type=int, default=3)
    g.add_argument("--flights", type=int, nargs=2, metavar=("MIN", "MAX"), default=(40, 90), help="flights per synthetic engine")
    g.add_argument("--steps-per-flight", type=int, default=300)
    g.add_argument("--data", nargs="*", default=[], metavar="CSV", help="engine CSV files instead of synthetic data")
    g.add_argument("--window-len", type=int, default=50)
    g.add_argument("--stride", type=int, default=10)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--agg-bucket", type=int, default=1, help="steps averaged into one (1 = no aggregation)")
    g.add_argument("--noise-alpha", type=float, default=0.0)
    g.add_argument("--noise-clients", type=_ids, default=(1, 4), help="comma-separated noisy client ids")
    g.add_argument("--allow-noisy-majority", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--reset-optimizer", action="store_true", help="fresh Adam state every round")
    t.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    t.add_argument("--sequential", action="store_true", help="run in-process clients on the server thread")
    p.add_argument("--out", type=Path, help="CSV output path")
    p.add_argument("--timing", action="store_true", help="add a wall_time column")


def _config(args: argparse.Namespace, **overrides) -> bench.ExperimentConfig:
    fields = dict(
        n_clients=args.clients,
        test_engines=args.test_engines,
        flights_min=args.flights[0],
        flights_max=args.flights[1],
        steps_per_flight=args.steps_per_flight,
        csv_paths=tuple(args.data),
        window_len=args.window_len,
        stride=args.stride,
        val_fraction=args.val_fraction,
        agg_bucket=args.agg_bucket,
        noise_alpha=args.noise_alpha,
        noisy_client_ids=args.noise_clients,
        allow_noisy_majority=args.allow_noisy_majority,
        seed=args.seed,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        reset_optimizer=args.reset_optimizer,
        transport=args.transport,
        threaded=not args.sequential,
        label="csv" if args.data else "synthetic",
    )
    fields.update(overrides)
    return bench.ExperimentConfig(**fields)


def _emit(rows, args) -> None:
    if args.out:
        bench.emit_csv(rows, args.out, timing=args.timing)
        log.info("wrote %d rows to %s", len(rows), args.out)
    for r in rows:
        print(f"{r.scenario:10s} {r.method:16s} alpha={r.alpha:g} rmse={r.overall_rmse:.4f} mae={r.overall_mae:.4f} best_epoch={r.best_epoch}")


def cmd_fl(args) -> None:
    config = _config(args, method=args.aggregation)
    if args.connect:
        if args.client_id is None:
            raise ValueError("--connect needs --client-id")
        scenario = bench.build_scenario(config)
        fl = config.fl_config()
        serve_client(scenario.datasets[args.client_id], config.network(scenario.n_channels), args.connect, fl.train, fl.train_seed, fl.timeout)
        return
    if args.listen:
        config = replace(config, transport="tcp")
    scenario = bench.build_scenario(config)
    out = bench._train_and_test(
        config,
        scenario,
        scenario.datasets,
        scenario.pooled_stats,
        config.method,
        config.label,
        fl_overrides=dict(listen=args.listen or "127.0.0.1:0", external_clients=args.external_clients),
    )
    _emit([out.row], args)


def cmd_uc(args) -> None:
    _emit([bench.run_uc_baseline(_config(args))], args)


def cmd_ni(args) -> None:
    _emit(bench.run_ni_baseline(_config(args)), args)


def cmd_sweep(args) -> None:
    config = _config(args)
    methods = args.methods.split(",") if args.methods else list(bench.ALL_METHODS)
    for m in methods:
        AggregationMethod(m)
    rows, counts = bench.noise_sweep(config, _floats(args.alphas), methods, jobs=args.jobs)
    _emit(rows, args)
    if args.selection_out:
        bench.emit_selection_csv(counts, args.selection_out)
    failed = [r for r in rows if r.status != "ok"]
    if failed:
        raise RuntimeError(f"{len(failed)} sweep cell(s) failed; see the status column")


def cmd_gen_data(args) -> None:
    profile = SynthProfile(args.flights[0], args.flights[1], args.steps_per_flight)
    engines = synth_generate(args.engines, args.seed, profile)
    csv_emit([f for e in engines for f in e], args.out)
    print(f"wrote {args.engines} engines, {sum(len(e) for e in engines)} flights to {args.out}")


def cmd_ingest(args) -> None:
    flights = csv_ingest(args.paths)
    for engine, fl in group_by_engine(flights).items():
        steps = sum(f.n_steps for f in fl)
        print(json.dumps({"engine_id": engine, "flights": len(fl), "steps": steps, "channels": fl[0].n_channels}))
    if args.out:
        csv_emit(flights, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrul", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fl", help="federated training with one aggregation method")
    _common(p)
    p.add_argument("--aggregation", choices=bench.ALL_METHODS, default="fedavg")
    p.add_argument("--listen", help="server mode over TCP: host:port to bind")
    p.add_argument("--external-clients", action="store_true", help="with --listen, wait for separately started clients")
    p.add_argument("--connect", help="client mode: server host:port")
    p.add_argument("--client-id", type=int, help="client mode: which client of the scenario this process is")
    p.set_defaults(func=cmd_fl)

    for name, func, text in (("uc", cmd_uc, "centralized baseline on pooled data"), ("ni", cmd_ni, "one isolated model per client")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="every (method, alpha) cell")
    _common(p)
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in bench.DEFAULT_ALPHAS))
    p.add_argument("--methods", default="", help="comma-separated subset of aggregation methods")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--selection-out", type=Path, help="CSV of best-model selection counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write synthetic engines as CSV")
    p.add_argument("--engines", type=int, default=9)
    p.add_argument("--flights", type=int, nargs=2, metavar=("MIN", "MAX"), default=(40, 90))
    p.add_argument("--steps-per-flight", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="validate engine CSV files and summarize them")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", type=Path, help="re-emit the parsed flights as one CSV")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print(json.dumps({"error": "interrupted", "message": "interrupted"}), file=sys.stderr)
        return 130
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
