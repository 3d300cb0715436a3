import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedrul.dataprep import FlightSeries, build_client_dataset
from fedrul.synth import SynthProfile, synth_generate

settings.register_profile("default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)


def make_flight(steps=60, channels=3, engine="E", index=1, rul=0, seed=0) -> FlightSeries:
    rng = np.random.default_rng(seed)
    return FlightSeries(engine, index, rng.normal(size=(steps, channels)), rul)


def make_engine(n_flights=6, steps=60, channels=3, engine="E", seed=0) -> list[FlightSeries]:
    return [make_flight(steps, channels, engine, f, n_flights - f, seed * 1000 + f) for f in range(1, n_flights + 1)]


SMALL_PROFILE = SynthProfile(flights_min=8, flights_max=12, steps_per_flight=120)


@pytest.fixture(scope="session")
def small_engines():
    return synth_generate(6, seed=11, profile=SMALL_PROFILE)


@pytest.fixture(scope="session")
def small_datasets(small_engines):
    return [build_client_dataset(e, 0.2, 100 + i, None, i) for i, e in enumerate(small_engines)]
