import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodplan.data import (
    DEFAULT_COLUMNS, EPOCH, Normalizer, TimeSeriesFrame, chronological_split, fit_normalizer,
    load_csv, make_windows, write_csv,
)
from floodplan.errors import ConfigError, IngestionError, SchemaError
from floodplan.sim import default_topology, generate_dataset


@pytest.fixture(scope="module")
def frame():
    return generate_dataset(1, 300)


def toy_frame(T):
    vals = np.arange(T * 11, dtype=float).reshape(T, 11)
    return TimeSeriesFrame(EPOCH, DEFAULT_COLUMNS, vals)


def test_csv_round_trip(tmp_path, frame):
    p = tmp_path / "d.csv"
    write_csv(frame, p)
    back = load_csv(p)
    assert back == frame
    assert back.class_counts() == {"rain": 1, "tide": 1, "gate": 3, "pump": 2, "water": 4}
    header = p.read_text().splitlines()[0]
    assert header == "timestamp,RAIN_1,TIDE_S4,GATE_S26,GATE_S25B,GATE_S25A,PUMP_S26,PUMP_S25B,WS_S1,WS_S26,WS_S25B,WS_S25A"


def test_csv_physical_units_round_trip(tmp_path, frame):
    scale = default_topology().physical_scale()
    p = tmp_path / "phys.csv"
    write_csv(frame, p, scale=scale)
    with open(p) as fh:
        rows = list(csv.DictReader(fh))
    assert max(float(r["PUMP_S26"]) for r in rows) <= 1500.0
    back = load_csv(p, scale=scale)
    np.testing.assert_allclose(back.values, frame.values, rtol=0, atol=1e-12)


def test_missing_hour_is_reported(tmp_path, frame):
    p = tmp_path / "gap.csv"
    write_csv(frame, p)
    lines = p.read_text().splitlines()
    bad_ts = lines[11].split(",")[0]
    del lines[11]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError, match=f"missing hour {bad_ts}"):
        load_csv(p)


def test_unknown_prefix_rejected(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("timestamp,FOO_1\n2010-01-01T00:00:00,1.0\n")
    with pytest.raises(SchemaError):
        load_csv(p, expected_counts=None)


def test_class_counts_enforced(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("timestamp,RAIN_1\n2010-01-01T00:00:00,1.0\n")
    with pytest.raises(SchemaError):
        load_csv(p)


@pytest.mark.parametrize("T, n", [(96, 1), (100, 5)])
def test_window_counts(T, n):
    assert len(make_windows(toy_frame(T), 72, 24)) == n


def test_window_too_short():
    with pytest.raises(ConfigError):
        make_windows(toy_frame(95), 72, 24)


def test_window_layouts(frame):
    ev = make_windows(frame, 72, 24, "evaluator")
    mg = make_windows(frame, 72, 24, "manager")
    s = ev[0]
    assert s.past.shape == (72, 11) and s.future_cov.shape == (24, 7) and s.target.shape == (24, 4)
    m = mg[0]
    assert m.future_cov.shape == (24, 2) and m.target.shape == (24, 5)
    # future water levels never appear as an input column
    water = set(frame.indices(["water"]))
    assert not water & set(ev.layout.covariates) and not water & set(mg.layout.covariates)


def test_windows_are_adjacent_and_reconstruct_frame():
    f = toy_frame(130)
    ws = make_windows(f, 72, 24, "evaluator")
    for s in ws:
        lo, hi = s.past_interval()
        tlo, thi = s.target_interval()
        assert hi + 1 == tlo and thi - tlo + 1 == 24 and hi - lo + 1 == 72
        np.testing.assert_array_equal(s.past, f.values[lo:hi + 1])
        np.testing.assert_array_equal(s.target, f.values[tlo:thi + 1][:, f.indices(["water"])])
    rebuilt = np.vstack([ws[0].past] + [ws[i].past[-1:] for i in range(1, len(ws))]
                        + [f.values[ws.anchors[-1] + 1:]])
    np.testing.assert_array_equal(rebuilt, f.values)


def test_batch_accessors_match_samples(frame):
    ws = make_windows(frame, 72, 24, "evaluator")
    idx = np.array([0, 5, 17])
    np.testing.assert_array_equal(ws.past_batch(idx)[1], ws[5].past)
    np.testing.assert_array_equal(ws.future_batch(idx)[2], ws[17].future_cov)
    np.testing.assert_array_equal(ws.target_batch(idx)[0], ws[0].target)


@pytest.mark.parametrize("n, frac, n_train, n_test", [(10, 0.8, 8, 2), (7, 0.8, 5, 2)])
def test_split_counts(n, frac, n_train, n_test):
    ws = make_windows(toy_frame(95 + n), 72, 24)
    assert len(ws) == n
    tr, te = chronological_split(ws, frac)
    assert (len(tr), len(te)) == (n_train, n_test)
    assert tr.anchors.max() < te.anchors.min()


def test_split_purge_removes_leakage(frame):
    ws = make_windows(frame, 72, 24)
    tr, te = chronological_split(ws, 0.8, purge=24)
    last_train_end = tr.anchors.max() + 24
    assert last_train_end < te.anchors.min() + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalizer_round_trip_and_train_only(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(loc=rng.uniform(-5, 5, 11), scale=rng.uniform(0.1, 4, 11), size=(140, 11))
    f = TimeSeriesFrame(EPOCH, DEFAULT_COLUMNS, vals)
    ws = make_windows(f, 12, 4)
    tr, te = chronological_split(ws, 0.8)
    norm = fit_normalizer(f, tr)
    np.testing.assert_allclose(norm.denormalize(norm.normalize(vals)), vals, rtol=0, atol=1e-12)
    # scrambling test-only rows leaves the statistics untouched
    hi = int(tr.anchors.max()) + 4 + 1
    scrambled = vals.copy()
    scrambled[hi:] = rng.normal(size=scrambled[hi:].shape) * 100
    norm2 = fit_normalizer(TimeSeriesFrame(EPOCH, DEFAULT_COLUMNS, scrambled), tr)
    np.testing.assert_array_equal(norm.mean, norm2.mean)
    np.testing.assert_array_equal(norm.std, norm2.std)


def test_constant_column_normalizer():
    n = Normalizer.fit(np.ones((10, 2)))
    np.testing.assert_array_equal(n.std, 1.0)


def test_minmax_normalizer_maps_training_rows_to_unit_range():
    frame = generate_dataset(2, 300)
    train, _ = chronological_split(make_windows(frame), 0.8, purge=24)
    norm = fit_normalizer(frame, train, "minmax")
    hi = int(train.anchors.max()) + 25
    z = norm.normalize(frame.values[:hi])
    varying = frame.values[:hi].std(axis=0) > 0
    np.testing.assert_allclose(z[:, varying].min(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[:, varying].max(axis=0), 1.0, atol=1e-12)
    with pytest.raises(ConfigError):
        fit_normalizer(frame, train, "robust")
