"""Per-client data pipeline: CSV flights, 20 s bucketing, min-max scaling, windowing, noise."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlightSeries:
    engine_id: str
    flight_index: int
    measurements: np.ndarray  # (steps, channels)
    rul_label: int

    def __post_init__(self) -> None:
        m = np.asarray(self.measurements, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError(f"flight {self.engine_id}/{self.flight_index}: measurements must be (M>=1, H)")
        object.__setattr__(self, "measurements", m)

    @property
    def n_steps(self) -> int:
        return self.measurements.shape[0]

    @property
    def n_channels(self) -> int:
        return self.measurements.shape[1]

    def with_measurements(self, m: np.ndarray) -> "FlightSeries":
        return replace(self, measurements=m)

    def same_as(self, other: "FlightSeries") -> bool:
        return (
            str(self.engine_id) == str(other.engine_id)
            and self.flight_index == other.flight_index
            and self.rul_label == other.rul_label
            and self.measurements.shape == other.measurements.shape
            and np.array_equal(self.measurements, other.measurements)
        )


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("normalization stats need min <= max per channel")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NormalizationStats):
            return NotImplemented
        return np.array_equal(self.minimum, other.minimum) and np.array_equal(self.maximum, other.maximum)

    @classmethod
    def pooled(cls, stats: Iterable["NormalizationStats"]) -> "NormalizationStats":
        stats = list(stats)
        return cls(
            np.min([s.minimum for s in stats], axis=0),
            np.max([s.maximum for s in stats], axis=0),
        )


@dataclass(frozen=True)
class WindowSample:
    engine_id: str
    flight_index: int
    start_step: int  # 1-based
    values: np.ndarray
    rul_label: int


@dataclass(eq=False)
class WindowSet:
    """Stacked windows of one partition; indexable as :class:`WindowSample`."""

    x: np.ndarray  # (n, length, H) float32
    y: np.ndarray  # (n,) float64 RUL in flights
    engine_id: np.ndarray
    flight_index: np.ndarray
    start_step: np.ndarray

    def __len__(self) -> int:
        return int(self.y.size)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(
            str(self.engine_id[i]), int(self.flight_index[i]), int(self.start_step[i]), self.x[i], int(self.y[i])
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls, length: int, channels: int) -> "WindowSet":
        return cls(
            np.zeros((0, length, channels), np.float32),
            np.zeros(0),
            np.zeros(0, dtype=object),
            np.zeros(0, dtype=int),
            np.zeros(0, dtype=int),
        )

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample], length: int, channels: int) -> "WindowSet":
        if not samples:
            return cls.empty(length, channels)
        return cls(
            np.stack([s.values for s in samples]).astype(np.float32),
            np.array([s.rul_label for s in samples], dtype=np.float64),
            np.array([s.engine_id for s in samples], dtype=object),
            np.array([s.flight_index for s in samples], dtype=int),
            np.array([s.start_step for s in samples], dtype=int),
        )

    @classmethod
    def concat(cls, sets: Sequence["WindowSet"]) -> "WindowSet":
        return cls(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.engine_id for s in sets]),
            np.concatenate([s.flight_index for s in sets]),
            np.concatenate([s.start_step for s in sets]),
        )


@dataclass(eq=False)
class ClientDataset:
    client_id: int
    training_windows: WindowSet
    validation_windows: WindowSet
    validation_flights: list[FlightSeries]
    stats: NormalizationStats
    training_flights: list[FlightSeries] = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return len(self.training_windows)


# -- CSV -------------------------------------------------------------------


def _channel_columns(header: Sequence[str]) -> list[str]:
    chans = [c for c in header if c.startswith("ch_")]
    return sorted(chans, key=lambda c: int(c[3:]))


def csv_ingest(paths: str | os.PathLike | Iterable[str | os.PathLike]) -> list[FlightSeries]:
    """Read flights from one or more CSV files (``engine_id,flight_index,step,ch_1..ch_H``)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    rows: dict[tuple[str, int], list[tuple[int, list[float], str, int]]] = defaultdict(list)
    n_channels = None
    for path in paths:
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise IngestError(f"{path}: empty file") from None
            missing = [c for c in ("engine_id", "flight_index", "step") if c not in header]
            chans = _channel_columns(header)
            if missing or not chans:
                raise IngestError(f"{path}: row 1: missing columns {missing or ['ch_1']}")
            expected = [f"ch_{i}" for i in range(1, len(chans) + 1)]
            if chans != expected:
                raise IngestError(f"{path}: row 1: channel columns must be ch_1..ch_{len(chans)}")
            if n_channels is None:
                n_channels = len(chans)
            elif n_channels != len(chans):
                raise IngestError(f"{path}: row 1: {len(chans)} channels, earlier files had {n_channels}")
            pos = {name: header.index(name) for name in header}
            cidx = [pos[c] for c in chans]
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise IngestError(f"{path}: row {lineno}: {len(rec)} fields, header has {len(header)}")
                try:
                    key = (rec[pos["engine_id"]].strip(), int(rec[pos["flight_index"]]))
                    step = int(rec[pos["step"]])
                    values = [float(rec[i]) for i in cidx]
                except ValueError as exc:
                    raise IngestError(f"{path}: row {lineno}: {exc}") from None
                rows[key].append((step, values, str(path), lineno))
    last_flight: dict[str, int] = defaultdict(int)
    for engine, flight in rows:
        last_flight[engine] = max(last_flight[engine], flight)
    flights = []
    for (engine, flight), recs in sorted(rows.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        recs.sort(key=lambda r: r[0])
        for prev, cur in zip(recs, recs[1:]):
            if cur[0] <= prev[0]:
                raise IngestError(f"{cur[2]}: row {cur[3]}: non-monotonic time, step {cur[0]} repeated in flight {engine}/{flight}")
        flights.append(
            FlightSeries(engine, flight, np.array([r[1] for r in recs]), last_flight[engine] - flight)
        )
    return flights


def csv_emit(flights: Iterable[FlightSeries], path: str | os.PathLike) -> None:
    """Write flights in the ingest schema; ``repr`` floats keep the round trip exact."""
    flights = list(flights)
    n_ch = flights[0].n_channels if flights else 0
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["engine_id", "flight_index", "step"] + [f"ch_{i}" for i in range(1, n_ch + 1)])
        for f in flights:
            for step, row in enumerate(f.measurements, start=1):
                w.writerow([f.engine_id, f.flight_index, step] + [repr(float(v)) for v in row])
    os.replace(tmp, path)


def group_by_engine(flights: Iterable[FlightSeries]) -> dict[str, list[FlightSeries]]:
    out: dict[str, list[FlightSeries]] = defaultdict(list)
    for f in flights:
        out[str(f.engine_id)].append(f)
    return {k: sorted(v, key=lambda f: f.flight_index) for k, v in sorted(out.items())}


# -- transforms ------------------------------------------------------------


def aggregate_mean(series: FlightSeries, bucket: int) -> FlightSeries:
    if bucket < 1:
        raise ValueError("bucket must be >= 1")
    if bucket == 1:
        return series
    m = series.measurements
    n_full = m.shape[0] // bucket
    parts = []
    if n_full:
        parts.append(m[: n_full * bucket].reshape(n_full, bucket, -1).mean(axis=1))
    if m.shape[0] % bucket:
        parts.append(m[n_full * bucket:].mean(axis=0, keepdims=True))
    return series.with_measurements(np.concatenate(parts))


def minmax_fit(flights: Sequence[FlightSeries]) -> NormalizationStats:
    if not flights:
        raise ValueError("minmax_fit needs at least one flight")
    return NormalizationStats(
        np.min([f.measurements.min(axis=0) for f in flights], axis=0),
        np.max([f.measurements.max(axis=0) for f in flights], axis=0),
    )


def minmax_apply(series: FlightSeries, stats: NormalizationStats) -> FlightSeries:
    span = stats.maximum - stats.minimum
    flat = span == 0
    safe = np.where(flat, 1.0, span)
    scaled = 2.0 * (series.measurements - stats.minimum) / safe - 1.0
    scaled[:, flat] = 0.0
    return series.with_measurements(scaled)


def minmax_invert(series: FlightSeries, stats: NormalizationStats) -> FlightSeries:
    span = stats.maximum - stats.minimum
    return series.with_measurements((series.measurements + 1.0) / 2.0 * span + stats.minimum)


def window_extract(series: FlightSeries, length: int = 50, stride: int = 10) -> list[WindowSample]:
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be >= 1")
    m = series.measurements
    if m.shape[0] < length:
        log.warning(
            "flight %s/%s has %d steps, shorter than window %d; skipped",
            series.engine_id, series.flight_index, m.shape[0], length,
        )
        return []
    return [
        WindowSample(series.engine_id, series.flight_index, s + 1, m[s:s + length], series.rul_label)
        for s in range(0, m.shape[0] - length + 1, stride)
    ]


def windows_of(flights: Sequence[FlightSeries], length: int = 50, stride: int = 10) -> WindowSet:
    channels = flights[0].n_channels if flights else 0
    samples = [w for f in flights for w in window_extract(f, length, stride)]
    return WindowSet.from_samples(samples, length, channels)


def split_flights(
    flights: Sequence[FlightSeries], val_fraction: float = 0.2, seed: int = 0
) -> tuple[list[FlightSeries], list[FlightSeries]]:
    if len(flights) < 2:
        raise ValueError("split_flights needs at least 2 flights")
    # round half up: 0.2 * 10.5 flights should not depend on banker's rounding
    n_val = max(1, int(math.floor(val_fraction * len(flights) + 0.5)))
    n_val = min(n_val, len(flights) - 1)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(flights), size=n_val, replace=False).tolist())
    train = [f for i, f in enumerate(flights) if i not in chosen]
    val = [f for i, f in enumerate(flights) if i in chosen]
    return train, val


def channel_std(flights: Sequence[FlightSeries]) -> np.ndarray:
    """Population std of each channel over every step of every flight."""
    return np.concatenate([f.measurements for f in flights]).std(axis=0)


def inject_noise(flights: Sequence[FlightSeries], alpha: float, seed: int = 0) -> list[FlightSeries]:
    """Add zero-mean Gaussian noise with std alpha times each channel's std over the whole engine."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0 or not flights:
        return list(flights)
    sigma = alpha * channel_std(flights)
    rng = np.random.default_rng(seed)
    return [f.with_measurements(f.measurements + rng.normal(size=f.measurements.shape) * sigma) for f in flights]


def build_client_dataset(
    flights: Sequence[FlightSeries],
    val_fraction: float = 0.2,
    seed: int = 0,
    stats_source: NormalizationStats | None = None,
    client_id: int = 0,
    window_len: int = 50,
    stride: int = 10,
) -> ClientDataset:
    """Fit (or take) min-max stats, normalize, split by flight, then window each partition."""
    stats = stats_source if stats_source is not None else minmax_fit(flights)
    normed = [minmax_apply(f, stats) for f in flights]
    train, val = split_flights(normed, val_fraction, seed)
    return ClientDataset(
        client_id=client_id,
        training_windows=windows_of(train, window_len, stride),
        validation_windows=windows_of(val, window_len, stride),
        validation_flights=val,
        stats=stats,
        training_flights=train,
    )


def merge_datasets(datasets: Sequence[ClientDataset], client_id: int = 0) -> ClientDataset:
    """Pool several client datasets into one (the centralized baseline)."""
    return ClientDataset(
        client_id=client_id,
        training_windows=WindowSet.concat([d.training_windows for d in datasets]),
        validation_windows=WindowSet.concat([d.validation_windows for d in datasets]),
        validation_flights=[f for d in datasets for f in d.validation_flights],
        stats=NormalizationStats.pooled(d.stats for d in datasets),
        training_flights=[f for d in datasets for f in d.training_flights],
    )
