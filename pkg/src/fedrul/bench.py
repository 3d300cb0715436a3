"""Experiment driver: multi-airline scenarios, FL runs, UC / NI baselines, noise sweeps, CSV tables."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fedrul.aggregation import AggregationMethod
from fedrul.dataprep import (
    ClientDataset,
    FlightSeries,
    NormalizationStats,
    aggregate_mean,
    build_client_dataset,
    csv_ingest,
    group_by_engine,
    inject_noise,
    merge_datasets,
    minmax_apply,
    minmax_fit,
)
from fedrul.nn import NetworkSpec, ParameterVector, rul_cnn
from fedrul.runtime import FLConfig, ServerState, TrainConfig, predict_flight_rul, run_training
from fedrul.synth import SynthProfile, synth_generate

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.0, 0.1, 0.5, 0.7, 1.0, 2.0)
ALL_METHODS = tuple(m.value for m in AggregationMethod)


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 6
    test_engines: int = 3
    flights_min: int = 40
    flights_max: int = 90
    steps_per_flight: int = 300
    noise_alpha: float = 0.0
    noisy_client_ids: tuple[int, ...] = (1, 4)
    allow_noisy_majority: bool = False
    method: str = "fedavg"
    epochs: int = 100
    seed: int = 0
    data_seed: int | None = None
    train_seed: int | None = None
    noise_seed: int | None = None
    assign_seed: int | None = None
    transport: str = "inproc"
    threaded: bool = True
    window_len: int = 50
    stride: int = 10
    val_fraction: float = 0.2
    agg_bucket: int = 1
    learning_rate: float = 0.001
    batch_size: int = 128
    reset_optimizer: bool = False
    csv_paths: tuple[str, ...] = ()
    label: str = "synthetic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "noisy_client_ids", tuple(sorted(set(self.noisy_client_ids))))
        object.__setattr__(self, "csv_paths", tuple(str(p) for p in self.csv_paths))
        AggregationMethod(self.method)
        if self.n_clients < 1 or self.test_engines < 1:
            raise ValueError("need at least one client and one test engine")
        bad = [c for c in self.noisy_client_ids if not 0 <= c < self.n_clients]
        if bad and self.noise_alpha > 0:
            raise ValueError(f"noisy client ids {bad} are not clients")
        if self.noise_alpha > 0 and len(self.noisy_client_ids) >= math.ceil(self.n_clients / 2):
            msg = f"{len(self.noisy_client_ids)} noisy clients out of {self.n_clients} is not a minority"
            if not self.allow_noisy_majority:
                raise ValueError(msg + " (pass allow_noisy_majority to override)")
            warnings.warn(msg)

    def derived_seed(self, purpose: str) -> int:
        explicit = getattr(self, f"{purpose}_seed")
        if explicit is not None:
            return int(explicit)
        return int(np.random.SeedSequence([self.seed, zlib.crc32(purpose.encode())]).generate_state(1)[0])

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def fl_config(self, method: str | None = None, **overrides) -> FLConfig:
        fields = dict(
            method=AggregationMethod(method or self.method),
            epochs=self.epochs,
            train=TrainConfig(self.batch_size, self.learning_rate, self.reset_optimizer),
            train_seed=self.derived_seed("train"),
            assign_seed=self.derived_seed("assign"),
            transport=self.transport,
            threaded=self.threaded,
        )
        fields.update(overrides)
        return FLConfig(**fields)

    def network(self, channels: int) -> NetworkSpec:
        return rul_cnn(seed=self.derived_seed("train"), input_window=self.window_len, input_channels=channels)


@dataclass(frozen=True)
class EngineMetrics:
    engine_id: str
    rmse: float
    mae: float


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    method: str
    alpha: float
    engines: tuple[EngineMetrics, ...]
    overall_rmse: float
    overall_mae: float
    best_epoch: int | None
    config_hash: str
    status: str = "ok"
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class Scenario:
    config: ExperimentConfig
    client_flights: list[list[FlightSeries]]  # raw (bucketed, noise applied)
    test_flights: list[list[FlightSeries]]  # raw
    datasets: list[ClientDataset]  # own-engine normalization

    @property
    def n_channels(self) -> int:
        return self.client_flights[0][0].n_channels

    @property
    def pooled_stats(self) -> NormalizationStats:
        return NormalizationStats.pooled(d.stats for d in self.datasets)

    def split_seed(self, client: int) -> int:
        return int(np.random.SeedSequence([self.config.derived_seed("data"), 1000 + client]).generate_state(1)[0])

    def dataset(self, client: int, stats: NormalizationStats | None = None) -> ClientDataset:
        c = self.config
        return build_client_dataset(
            self.client_flights[client], c.val_fraction, self.split_seed(client), stats, client, c.window_len, c.stride
        )


def _load_engines(config: ExperimentConfig) -> list[list[FlightSeries]]:
    n = config.n_clients + config.test_engines
    if config.csv_paths:
        engines = list(group_by_engine(csv_ingest(config.csv_paths)).values())
        if len(engines) < n:
            raise ValueError(f"CSV data has {len(engines)} engines, scenario needs {n}")
        return engines[:n]
    half = (config.n_clients + 1) // 2
    modes = tuple([1] * half + [2] * (config.n_clients - half) + [2] * config.test_engines)
    profile = SynthProfile(config.flights_min, config.flights_max, config.steps_per_flight, fault_modes=modes)
    return synth_generate(n, config.derived_seed("data"), profile)


def build_scenario(config: ExperimentConfig) -> Scenario:
    """Clients 0..N-1 own one engine each; the remaining engines are held-out test engines."""
    engines = [[aggregate_mean(f, config.agg_bucket) for f in e] for e in _load_engines(config)]
    clients = engines[: config.n_clients]
    tests = engines[config.n_clients:]
    if config.noise_alpha > 0:
        noise_base = config.derived_seed("noise")
        for c in config.noisy_client_ids:
            clients[c] = inject_noise(clients[c], config.noise_alpha, noise_base + c)
    scenario = Scenario(config, clients, tests, [])
    scenario.datasets = [scenario.dataset(c) for c in range(config.n_clients)]
    return scenario


def evaluate_test_engines(
    spec: NetworkSpec, params: ParameterVector, test_flights: Sequence[Sequence[FlightSeries]], stats: NormalizationStats, stride: int
) -> tuple[tuple[EngineMetrics, ...], float, float]:
    """Flight-level RMSE/MAE per test engine plus pooled over all test flights."""
    per_engine = []
    all_res = []
    for flights in test_flights:
        res = []
        for f in flights:
            if f.n_steps < spec.input_window:
                continue
            res.append(predict_flight_rul(spec, params, minmax_apply(f, stats), stride) - f.rul_label)
        res = np.asarray(res)
        all_res.append(res)
        per_engine.append(EngineMetrics(str(flights[0].engine_id), float(np.sqrt(np.mean(res**2))), float(np.mean(np.abs(res)))))
    pooled = np.concatenate(all_res)
    return tuple(per_engine), float(np.sqrt(np.mean(pooled**2))), float(np.mean(np.abs(pooled)))


@dataclass
class RunOutcome:
    row: ResultRow
    state: ServerState
    best_params: ParameterVector


def _train_and_test(
    c: ExperimentConfig,
    scenario: Scenario,
    datasets,
    test_stats,
    method: str,
    label: str,
    row_method: str | None = None,
    fl_overrides: dict | None = None,
) -> RunOutcome:
    t0 = time.perf_counter()
    spec = c.network(scenario.n_channels)
    state, best = run_training(datasets, spec, c.fl_config(method, **(fl_overrides or {})))
    engines, overall_rmse, overall_mae = evaluate_test_engines(spec, best, scenario.test_flights, test_stats, c.stride)
    row = ResultRow(
        scenario=label,
        method=row_method or method,
        alpha=c.noise_alpha,
        engines=engines,
        overall_rmse=overall_rmse,
        overall_mae=overall_mae,
        best_epoch=state.best_checkpoint.epoch,
        config_hash=c.config_hash(),
        wall_time=time.perf_counter() - t0,
    )
    return RunOutcome(row, state, best)


def run_fl(config: ExperimentConfig, scenario: Scenario | None = None) -> RunOutcome:
    scenario = scenario or build_scenario(config)
    return _train_and_test(config, scenario, scenario.datasets, scenario.pooled_stats, config.method, config.label)


def run_fl_experiment(config: ExperimentConfig) -> ResultRow:
    return run_fl(config).row


def run_uc(config: ExperimentConfig, scenario: Scenario | None = None) -> RunOutcome:
    """Centralized baseline: pooled min-max stats, same flight split, one model on all windows."""
    scenario = scenario or build_scenario(config)
    pooled = NormalizationStats.pooled(minmax_fit(f) for f in scenario.client_flights)
    merged = merge_datasets([scenario.dataset(c, pooled) for c in range(config.n_clients)], client_id=0)
    return _train_and_test(config, scenario, [merged], pooled, "fedavg", "uc", row_method="uc")


def run_uc_baseline(config: ExperimentConfig) -> ResultRow:
    return run_uc(config).row


def mean_row(rows: Sequence[ResultRow], scenario: str, method: str) -> ResultRow:
    engines = tuple(
        EngineMetrics(
            group[0].engine_id,
            float(np.mean([g.rmse for g in group])),
            float(np.mean([g.mae for g in group])),
        )
        for group in zip(*[r.engines for r in rows])
    )
    return ResultRow(
        scenario=scenario,
        method=method,
        alpha=rows[0].alpha,
        engines=engines,
        overall_rmse=float(np.mean([r.overall_rmse for r in rows])),
        overall_mae=float(np.mean([r.overall_mae for r in rows])),
        best_epoch=None,
        config_hash=rows[0].config_hash,
        wall_time=float(sum(r.wall_time for r in rows)),
    )


def run_ni_baseline(config: ExperimentConfig, scenario: Scenario | None = None) -> list[ResultRow]:
    """One isolated model per client, tested with that client's own normalization; plus the mean row."""
    scenario = scenario or build_scenario(config)
    rows = []
    for ds in scenario.datasets:
        out = _train_and_test(config, scenario, [ds], ds.stats, "fedavg", "ni", row_method=f"ni-client-{ds.client_id}")
        rows.append(out.row)
    return rows + [mean_row(rows, "ni", "ni-mean")]


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionCount:
    method: str
    alpha: float
    client_id: int
    times_selected: int
    epochs: tuple[int, ...]


def selection_counts(state: ServerState, method: str, alpha: float) -> list[SelectionCount]:
    picks: dict[int, list[int]] = {c: [] for c in state.client_ids}
    for report in state.history:
        if report.selected is not None:
            picks[report.selected].append(report.epoch)
    return [SelectionCount(method, alpha, c, len(e), tuple(e)) for c, e in picks.items()]


def _sweep_cell(args) -> tuple[ResultRow, list[SelectionCount]]:
    config, method, alpha = args
    cell = replace(config, method=method, noise_alpha=alpha)
    try:
        out = run_fl(cell)
    except Exception as exc:  # a failed cell must not stop the sweep
        log.exception("sweep cell %s alpha=%s failed", method, alpha)
        row = ResultRow(cell.label, method, alpha, (), float("nan"), float("nan"), None, cell.config_hash(), f"failed: {exc}")
        return row, []
    counts = selection_counts(out.state, method, alpha) if AggregationMethod(method).rule == "best" else []
    return out.row, counts


def noise_sweep(
    config: ExperimentConfig,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    methods: Sequence[str] = ALL_METHODS,
    jobs: int = 1,
) -> tuple[list[ResultRow], list[SelectionCount]]:
    cells = [(config, m, float(a)) for a in alphas for m in methods]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = [r for r, _ in results]
    counts = [s for _, sel in results for s in sel]
    return rows, counts


# -- CSV output --------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.4f}"
    return str(x)


def _atomic_write(path: str | os.PathLike, header: list[str], lines: list[list[str]]) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with tmp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(lines)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


BASE_COLUMNS = ["scenario", "method", "alpha", "status", "overall_rmse", "overall_mae", "best_epoch", "config_hash"]


def emit_csv(rows: Sequence[ResultRow], path: str | os.PathLike, timing: bool = False) -> None:
    """One line per row; per-engine columns follow in first-seen engine order.

    Wall time is only written with ``timing=True`` so reruns stay byte-identical.
    """
    engine_ids: list[str] = []
    for r in rows:
        for e in r.engines:
            if e.engine_id not in engine_ids:
                engine_ids.append(e.engine_id)
    header = BASE_COLUMNS + [f"{k}_{e}" for e in engine_ids for k in ("rmse", "mae")]
    if timing:
        header.append("wall_time")
    lines = []
    for r in rows:
        by_id = {e.engine_id: e for e in r.engines}
        line = [r.scenario, r.method, f"{r.alpha:g}", r.status, _fmt(r.overall_rmse), _fmt(r.overall_mae), _fmt(r.best_epoch), r.config_hash]
        for e in engine_ids:
            m = by_id.get(e)
            line += [_fmt(m.rmse), _fmt(m.mae)] if m else ["", ""]
        if timing:
            line.append(f"{r.wall_time:.2f}")
        lines.append(line)
    _atomic_write(path, header, lines)


def emit_selection_csv(counts: Sequence[SelectionCount], path: str | os.PathLike) -> None:
    lines = [[c.method, f"{c.alpha:g}", str(c.client_id), str(c.times_selected), " ".join(map(str, c.epochs))] for c in counts]
    _atomic_write(path, ["method", "alpha", "client_id", "times_selected", "epochs"], lines)


def read_csv_rows(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
