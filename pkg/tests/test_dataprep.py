import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import make_engine, make_flight
from fedrul.dataprep import (
    FlightSeries,
    IngestError,
    NormalizationStats,
    aggregate_mean,
    build_client_dataset,
    channel_std,
    csv_emit,
    csv_ingest,
    group_by_engine,
    inject_noise,
    merge_datasets,
    minmax_apply,
    minmax_fit,
    minmax_invert,
    split_flights,
    window_extract,
    windows_of,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# -- CSV -------------------------------------------------------------------


def test_ingest_toy_file(tmp_path):
    p = write(
        tmp_path / "a.csv",
        "engine_id,flight_index,step,ch_1,ch_2\n"
        "E1,2,1,5,6\nE1,1,2,3,4\nE1,1,1,1,2\nE1,2,2,7,8\nE1,1,3,9,9\nE1,2,3,0,0\n",
    )
    flights = csv_ingest(p)
    assert [(f.flight_index, f.n_steps, f.rul_label) for f in flights] == [(1, 3, 1), (2, 3, 0)]
    assert flights[0].measurements[:, 0].tolist() == [1, 3, 9]


def test_ingest_order_independent(tmp_path):
    rows = [f"E,{f},{s},{f * 10 + s},{-s}" for f in (1, 2) for s in (1, 2, 3)]
    a = csv_ingest(write(tmp_path / "a.csv", "engine_id,flight_index,step,ch_1,ch_2\n" + "\n".join(rows)))
    b = csv_ingest(write(tmp_path / "b.csv", "engine_id,flight_index,step,ch_1,ch_2\n" + "\n".join(rows[::-1])))
    assert all(x.same_as(y) for x, y in zip(a, b))


@pytest.mark.parametrize(
    "body, fragment",
    [
        ("engine_id,step,ch_1\nE,1,1\n", "row 1: missing columns ['flight_index']"),
        ("engine_id,flight_index,step,ch_1\nE,1,1,1\nE,1,1,2\n", "row 3: non-monotonic time"),
        ("engine_id,flight_index,step,ch_1,ch_2\nE,1,1,1,2\nE,1,2,1\n", "row 3: 4 fields"),
        ("engine_id,flight_index,step,ch_1\nE,1,1,abc\n", "row 2"),
        ("engine_id,flight_index,step,ch_2\nE,1,1,1\n", "ch_1..ch_1"),
    ],
)
def test_ingest_errors_name_file_and_row(tmp_path, body, fragment):
    p = write(tmp_path / "bad.csv", body)
    with pytest.raises(IngestError) as err:
        csv_ingest(p)
    assert "bad.csv" in str(err.value) and fragment in str(err.value)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 100))
def test_emit_then_ingest_round_trips(tmp_path_factory, n_flights, steps, channels, seed):
    flights = [make_flight(steps, channels, "X7", f, n_flights - f, seed + f) for f in range(1, n_flights + 1)]
    path = tmp_path_factory.mktemp("rt") / "e.csv"
    csv_emit(flights, path)
    back = csv_ingest(path)
    assert len(back) == n_flights and all(a.same_as(b) for a, b in zip(flights, back))


def test_group_by_engine_sorts_flights():
    flights = [make_flight(engine="B", index=2), make_flight(engine="A", index=1), make_flight(engine="B", index=1)]
    groups = group_by_engine(flights)
    assert list(groups) == ["A", "B"] and [f.flight_index for f in groups["B"]] == [1, 2]


# -- aggregation and normalization -----------------------------------------


def test_aggregate_mean_keeps_partial_bucket():
    f = FlightSeries("E", 1, np.arange(7.0).reshape(7, 1), 0)
    assert aggregate_mean(f, 3).measurements.ravel().tolist() == [1.0, 4.0, 6.0]
    assert aggregate_mean(f, 1) is f
    with pytest.raises(ValueError):
        aggregate_mean(f, 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)), elements=finite))
def test_minmax_range_and_inverse(m):
    f = FlightSeries("E", 1, m, 0)
    stats = minmax_fit([f])
    z = minmax_apply(f, stats).measurements
    assert np.all(z >= -1 - 1e-12) and np.all(z <= 1 + 1e-12)
    varying = stats.maximum > stats.minimum
    assert np.all(z[:, ~varying] == 0)
    back = minmax_invert(minmax_apply(f, stats), stats).measurements
    np.testing.assert_allclose(back[:, varying], m[:, varying], rtol=1e-9, atol=1e-6)


def test_minmax_extremes_map_to_bounds():
    f = FlightSeries("E", 1, np.array([[0.0, 5.0], [10.0, 5.0], [5.0, 5.0]]), 0)
    z = minmax_apply(f, minmax_fit([f])).measurements
    assert z.tolist() == [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]


def test_pooled_stats_span_all_clients():
    a = NormalizationStats(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    b = NormalizationStats(np.array([-1.0, 1.5]), np.array([0.5, 3.0]))
    pooled = NormalizationStats.pooled([a, b])
    assert pooled.minimum.tolist() == [-1.0, 1.0] and pooled.maximum.tolist() == [1.0, 3.0]
    assert pooled != a


# -- windowing and splitting ------------------------------------------------


def test_window_starts_and_dropped_tail():
    f = make_flight(steps=75)
    wins = window_extract(f, 50, 10)
    assert [w.start_step for w in wins] == [1, 11, 21]
    assert np.array_equal(wins[2].values, f.measurements[20:70])


def test_short_flight_yields_no_windows_and_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert window_extract(make_flight(steps=49), 50, 10) == []
    assert "shorter than window" in caplog.text


@given(st.integers(1, 200), st.integers(1, 60), st.integers(1, 20))
def test_window_count_formula(steps, length, stride):
    f = make_flight(steps=steps, channels=1)
    expected = 0 if steps < length else (steps - length) // stride + 1
    assert len(window_extract(f, length, stride)) == expected


def test_split_counts_and_rounding():
    assert [len(v) for v in split_flights(make_engine(10), 0.2, 0)] == [8, 2]
    assert len(split_flights(make_engine(3), 0.2, 0)[1]) == 1  # 0.6 rounds up to 1
    assert len(split_flights(make_engine(2), 0.9, 0)[1]) == 1  # at least one training flight
    with pytest.raises(ValueError):
        split_flights(make_engine(1))


@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_split_is_seeded_partition(n, seed):
    flights = make_engine(n, steps=2, channels=1)
    train, val = split_flights(flights, 0.2, seed)
    ids_t = {f.flight_index for f in train}
    ids_v = {f.flight_index for f in val}
    assert not ids_t & ids_v and ids_t | ids_v == set(range(1, n + 1))
    assert [f.flight_index for f in split_flights(flights, 0.2, seed)[1]] == [f.flight_index for f in val]


# -- noise -------------------------------------------------------------------


def test_noise_zero_alpha_is_identity():
    flights = make_engine(3)
    out = inject_noise(flights, 0.0, 1)
    assert all(a is b for a, b in zip(out, flights))


def test_noise_leaves_constant_channel_alone():
    flights = [FlightSeries("E", 1, np.column_stack([np.arange(100.0), np.full(100, 4.0)]), 0)]
    noisy = inject_noise(flights, 2.0, 3)[0].measurements
    assert np.all(noisy[:, 1] == 4.0) and not np.array_equal(noisy[:, 0], np.arange(100.0))


def test_noise_scale_uses_engine_wide_std():
    flights = make_engine(4, steps=5000, channels=2, seed=3)
    sigma = channel_std(flights)
    diff = np.concatenate([n.measurements - c.measurements for n, c in zip(inject_noise(flights, 0.5, 9), flights)])
    np.testing.assert_allclose(diff.std(axis=0), 0.5 * sigma, rtol=0.03)


def test_noise_deterministic_per_seed():
    flights = make_engine(2)
    a, b = inject_noise(flights, 1.0, 5), inject_noise(flights, 1.0, 5)
    assert all(x.same_as(y) for x, y in zip(a, b))


# -- pipeline ----------------------------------------------------------------


def test_pipeline_counts_windows_independently():
    flights = make_engine(10, steps=73, channels=2)
    ds = build_client_dataset(flights, 0.2, seed=4)
    train_ids = {f.flight_index for f in ds.training_flights}
    assert len(train_ids) == 8
    assert ds.n_train == 8 * ((73 - 50) // 10 + 1) == 24
    assert not train_ids & {f.flight_index for f in ds.validation_flights}


def test_pipeline_windows_equal_slices_of_normalized_flights():
    flights = make_engine(5, steps=90, channels=2)
    ds = build_client_dataset(flights, 0.2, seed=1)
    stats = minmax_fit(flights)
    by_index = {f.flight_index: minmax_apply(f, stats).measurements for f in flights}
    for w in ds.training_windows:
        src = by_index[w.flight_index]
        np.testing.assert_array_equal(w.values, src[w.start_step - 1:w.start_step + 49].astype(np.float32))
        assert w.rul_label == 5 - w.flight_index


def test_provided_stats_are_kept_verbatim():
    stats = NormalizationStats(np.full(2, -10.0), np.full(2, 10.0))
    assert build_client_dataset(make_engine(4, channels=2), stats_source=stats).stats is stats


@given(st.floats(0.1, 100))
def test_normalization_locality(scale):
    a, b = make_engine(4, engine="A", seed=1), make_engine(4, engine="B", seed=2)
    ds_b = build_client_dataset(b, seed=3, client_id=1)
    build_client_dataset([f.with_measurements(f.measurements * scale) for f in a], seed=3)
    again = build_client_dataset(b, seed=3, client_id=1)
    assert ds_b.stats == again.stats
    assert np.array_equal(ds_b.training_windows.x, again.training_windows.x)


def test_merge_pools_windows():
    d1 = build_client_dataset(make_engine(5, engine="A"), client_id=0)
    d2 = build_client_dataset(make_engine(5, engine="B", seed=4), client_id=1)
    merged = merge_datasets([d1, d2])
    assert merged.n_train == d1.n_train + d2.n_train
    assert len(merged.validation_windows) == len(d1.validation_windows) + len(d2.validation_windows)
    assert windows_of([], 50, 10).x.shape == (0, 50, 0)
