"""Synthetic run-to-failure engines standing in for N-CMAPSS DS02.

Each flight is a climb / cruise / descent profile over four operating-condition
channels (alt, Mach, TRA, T2). Thirteen sensor channels are smooth functions of
the conditions plus a degradation offset driven by a health index that grows
linearly, then accelerates, towards failure. The two fault modes push disjoint
sensor subsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedrul.dataprep import FlightSeries

CONDITIONS = ("alt", "Mach", "TRA", "T2")
SENSORS = ("Wf", "Nf", "T24", "T30", "T48", "T50", "P2", "P50", "W21", "W50", "SmFan", "SmLPC", "SmHPC")
CHANNELS = CONDITIONS + SENSORS

# nominal sensor magnitudes, roughly in the units of the real data set
_BASE = np.array([2.5, 2200.0, 620.0, 1500.0, 2000.0, 1300.0, 12.0, 18.0, 250.0, 220.0, 16.0, 8.0, 25.0])

# relative degradation signature per fault mode; the two supports are disjoint
_FAULT_SIGNATURE = {
    1: {"Wf": 0.11, "T30": 0.08, "T48": 0.12, "T50": 0.11, "Nf": -0.07, "SmHPC": -0.14},
    2: {"T24": 0.08, "P50": -0.12, "W21": -0.10, "W50": -0.12, "SmFan": -0.14, "SmLPC": -0.11},
}

_PHYSICS_SEED = 0x5EED  # shared engine physics, independent of the data seed


@dataclass(frozen=True)
class SynthProfile:
    flights_min: int = 40
    flights_max: int = 90
    steps_per_flight: int = 120
    climb_fraction: float = 0.2
    descent_fraction: float = 0.2
    measurement_noise: float = 0.005  # relative to nominal magnitude
    fault_modes: tuple[int, ...] | None = None  # per engine; default: first half mode 1, rest mode 2

    def fault_mode(self, engine: int, n_engines: int) -> int:
        if self.fault_modes is not None:
            return self.fault_modes[engine]
        return 1 if engine < (n_engines + 1) // 2 else 2


def affected_channels(fault_mode: int) -> list[int]:
    return [len(CONDITIONS) + SENSORS.index(s) for s in _FAULT_SIGNATURE[fault_mode]]


def _physics():
    rng = np.random.default_rng(_PHYSICS_SEED)
    coupling = rng.uniform(-0.35, 0.35, size=(len(SENSORS), len(CONDITIONS)))
    # throttle dominates every sensor's range, so cruise values sit inside it
    coupling[:, 2] = rng.choice([-1.0, 1.0], size=len(SENSORS)) * rng.uniform(0.7, 1.0, size=len(SENSORS))
    curvature = rng.uniform(0.05, 0.25, size=len(SENSORS))
    return coupling, curvature


def health_index(flight_index: np.ndarray, n_flights: int, initial_wear: float, wear_rate: float, tau: float) -> np.ndarray:
    """Health loss reaching 1 at the last flight.

    Linear wear in absolute flights, plus an exponential term in the flights
    left before failure that takes over towards the end of life.
    """
    f = np.asarray(flight_index, dtype=np.float64)
    linear = initial_wear + wear_rate * f
    end_gap = 1.0 - (initial_wear + wear_rate * n_flights)
    return linear + end_gap * np.exp((f - n_flights) / tau)


def _flight_conditions(rng: np.random.Generator, profile: SynthProfile) -> tuple[np.ndarray, np.ndarray]:
    m = profile.steps_per_flight
    t = (np.arange(m) + 0.5) / m
    climb = profile.climb_fraction * rng.uniform(0.9, 1.1)
    descent = profile.descent_fraction * rng.uniform(0.9, 1.1)
    # trapezoid: ramp up, hold, ramp down
    level = np.clip(np.minimum(t / climb, (1.0 - t) / descent), 0.0, 1.0)
    cruise_alt = rng.uniform(30000.0, 35000.0)
    cruise_mach = rng.uniform(0.74, 0.82)
    alt = cruise_alt * level
    mach = 0.25 + (cruise_mach - 0.25) * level
    phase_tra = np.where(t < climb, 80.0, np.where(t > 1.0 - descent, 35.0, rng.uniform(57.0, 63.0)))
    tra = phase_tra + 2.0 * np.sin(2 * np.pi * t * rng.uniform(1.0, 3.0))
    t_amb = 518.67 - 0.00356 * alt
    t2 = t_amb * (1.0 + 0.2 * mach**2)
    # degradation shows during cruise only; takeoff and idle extremes stay nominal
    cruise = np.clip((t - climb) / 0.05, 0.0, 1.0) * np.clip((1.0 - descent - t) / 0.05, 0.0, 1.0)
    return np.column_stack([alt, mach, tra, t2]), cruise


def _engine_flights(engine: int, fault_mode: int, rng: np.random.Generator, profile: SynthProfile) -> list[FlightSeries]:
    coupling, curvature = _physics()
    n_flights = int(rng.integers(profile.flights_min, profile.flights_max + 1))
    wear0 = rng.uniform(0.0, 0.1)
    wear_rate = rng.uniform(0.003, 0.005)
    tau = rng.uniform(12.0, 20.0)
    signature = np.zeros(len(SENSORS))
    for name, v in _FAULT_SIGNATURE[fault_mode].items():
        signature[SENSORS.index(name)] = v * rng.uniform(0.85, 1.15)
    hi = health_index(np.arange(1, n_flights + 1), n_flights, wear0, wear_rate, tau)
    flights = []
    for f in range(1, n_flights + 1):
        cond, cruise = _flight_conditions(rng, profile)
        c = np.column_stack([cond[:, 0] / 40000.0, cond[:, 1], cond[:, 2] / 100.0, (cond[:, 3] - 400.0) / 150.0])
        rel = c @ coupling.T + curvature * c[:, 2:3] ** 2
        rel = rel + hi[f - 1] * signature * cruise[:, None]
        sensors = _BASE * (1.0 + rel)
        raw = np.column_stack([cond, sensors])
        scale = np.concatenate([[40000.0, 1.0, 100.0, 150.0], _BASE])
        raw = raw + rng.normal(size=raw.shape) * profile.measurement_noise * scale
        flights.append(FlightSeries(f"E{engine:03d}", f, raw, n_flights - f))
    return flights


def synth_generate(n_engines: int, seed: int = 0, profile: SynthProfile | None = None) -> list[list[FlightSeries]]:
    """Generate ``n_engines`` run-to-failure engines, deterministically per seed."""
    if n_engines < 1:
        raise ValueError("n_engines must be >= 1")
    profile = profile or SynthProfile()
    if profile.flights_min < 2 or profile.flights_max < profile.flights_min:
        raise ValueError("need 2 <= flights_min <= flights_max")
    if profile.fault_modes is not None and len(profile.fault_modes) != n_engines:
        raise ValueError("fault_modes must list one mode per engine")
    children = np.random.SeedSequence(seed).spawn(n_engines)
    return [
        _engine_flights(e, profile.fault_mode(e, n_engines), np.random.default_rng(children[e]), profile)
        for e in range(n_engines)
    ]
