import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from umamba.data import (MANIFEST, Dataset, MetricAccumulator, Scaler, canonical_name,
                         default_batch_size, default_channel_mode, load_csv, mae, mse, signed_me,
                         split, split_sizes, synthetic_ett, window_count, windows, write_csv)
from umamba.errors import ConfigError, DataError

DATA_DIR = Path(os.environ.get("UMAMBA_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def tiny_csv(tmp_path):
    return write(tmp_path / "tiny.csv", "date,a,b\n2020-01-01 00:00:00,1,2\n"
                 "2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n")


# loading


def test_three_row_fixture(tiny_csv):
    ds = load_csv(tiny_csv)
    assert ds.values.tolist() == [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    assert ds.channels == ["a", "b"] and ds.rows == 3


def test_non_numeric_cell_reports_row_and_column(tmp_path):
    p = write(tmp_path / "bad.csv", "date,a,b\n0,1,2\n1,3,oops\n")
    with pytest.raises(DataError, match=r"row 3, column 3 \(b\)"):
        load_csv(p)


@pytest.mark.parametrize("cell", ["nan", "", "inf"])
def test_missing_values_are_errors(tmp_path, cell):
    p = write(tmp_path / "gap.csv", f"date,a\n0,1\n1,{cell}\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p)


def test_ragged_row(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        load_csv(write(tmp_path / "r.csv", "date,a,b\n0,1\n"))


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "absent.csv")


def test_timestamps_must_increase(tmp_path):
    p = write(tmp_path / "t.csv", "date,a\n2020-01-01 02:00:00,1\n2020-01-01 01:00:00,2\n")
    with pytest.raises(DataError, match="strictly increasing"):
        load_csv(p)


def test_manifest_mismatch_cites_expected_and_found(tiny_csv):
    with pytest.raises(DataError, match="expected 17420 rows x 7 channels, found 3 rows x 2"):
        load_csv(tiny_csv, "ETTh1")


def test_undeclared_name_skips_manifest(tiny_csv):
    assert load_csv(tiny_csv, "my-series").name == "my-series"


def test_csv_round_trip(tmp_path, rng):
    ds = Dataset("x", ["p", "q"], rng.normal(size=(20, 2)), "", [str(i) for i in range(20)])
    write_csv(tmp_path / "x.csv", ds)
    assert np.array_equal(load_csv(tmp_path / "x.csv").values, ds.values)


def test_manifest_entries():
    assert (MANIFEST["ETTh1"].rows, MANIFEST["ETTh1"].channels) == (17420, 7)
    assert (MANIFEST["Weather"].rows, MANIFEST["Weather"].channels) == (52696, 21)
    assert canonical_name("ECL") == "Electricity" and canonical_name("etth1") == "ETTh1"
    assert default_channel_mode("ETTm2") == "integration"
    assert default_channel_mode("weather") == "parallel"
    assert [default_batch_size(n) for n in ("ETTh1", "Weather", "Traffic")] == [32, 16, 8]


def test_synthetic_stand_in_validates_like_etth1(tmp_path):
    ds = synthetic_ett(rows=400)
    write_csv(tmp_path / "s.csv", ds)
    assert load_csv(tmp_path / "s.csv").values.shape == (400, 7)


@pytest.mark.parametrize("name,shape", [("ETTh1", (17420, 7)), ("Weather", (52696, 21))])
def test_real_files_match_manifest(name, shape):
    path = DATA_DIR / {"ETTh1": "ETTh1.csv", "Weather": "weather.csv"}[name]
    if not path.is_file():
        pytest.skip(f"{path} not present")
    assert load_csv(path, name).values.shape == shape


# splitting


def test_split_hundred_rows():
    assert split_sizes(100) == (70, 20, 10)


def test_split_etth1_rows():
    assert split_sizes(17420) == (12194, 3484, 1742)


def test_split_uses_exact_decimal_floor():
    assert split_sizes(90) == (63, 18, 9)


@pytest.mark.parametrize("ratios", [(0.7, 0.2, 0.09), (0.7, 0.3, 0.0), (1.0,), (0.5, 0.6, -0.1)])
def test_split_ratio_errors(ratios):
    with pytest.raises(ConfigError):
        split_sizes(100, ratios)


def test_split_segments_are_chronological(rng):
    tr, va, te = split(rng.normal(size=(100, 2)))
    assert (tr.start, tr.stop, va.start, va.stop, te.start, te.stop) == (0, 70, 70, 90, 90, 100)


def test_split_too_short_segment():
    with pytest.raises(DataError, match="test segment has 10 rows"):
        split(np.zeros((100, 1)), min_len=12)


# windows


@pytest.mark.parametrize("length,L,T,stride,count", [(200, 96, 96, 1, 9), (192, 96, 96, 1, 1),
                                                     (300, 96, 96, 10, 11)])
def test_window_counts(length, L, T, stride, count):
    assert window_count(length, L, T, stride) == count
    assert len(windows(np.zeros((length, 1)), L, T, stride)) == count


def test_window_too_short():
    with pytest.raises(DataError):
        windows(np.zeros((191, 1)), 96, 96)


def test_window_contents():
    values = np.arange(20, dtype=float)[:, None] * np.array([[1.0, 10.0]])
    b = windows(values, 4, 3).batch([0, 5])
    assert b.X.shape == (2, 2, 4) and b.Y.shape == (2, 2, 3)
    assert b.X[1, 0].tolist() == [5, 6, 7, 8] and b.Y[1, 1].tolist() == [90, 100, 110]


def test_no_leakage_between_segments():
    values = np.arange(300, dtype=float)[:, None]
    used = []
    for seg in split(values):
        ws = windows(seg, 8, 4)
        b = ws.batch(np.arange(len(ws)))
        used.append((b.X.min(), max(b.X.max(), b.Y.max())))
    assert used[0][1] < used[1][0] and used[1][1] < used[2][0]


def test_border_lookback_reaches_back_but_targets_stay():
    values = np.arange(300, dtype=float)[:, None]
    _, va, _ = split(values)
    ws = windows(va, 8, 4, border_lookback=True)
    b = ws.batch(np.arange(len(ws)))
    assert b.X.min() == va.start - 8
    assert b.Y.min() >= va.start and b.Y.max() < va.stop
    assert len(ws) == len(va) - 4 + 1


@given(length=st.integers(12, 60))
def test_windows_exhaustive_at_stride_one(length):
    L, T = 5, 3
    ws = windows(np.arange(length, dtype=float)[:, None], L, T)
    X = ws.batch(np.arange(len(ws))).X[:, 0, :]
    # each offset j of the lookback visits rows [j, len - T - L + j] exactly once
    for j in range(L):
        assert X[:, j].tolist() == list(range(j, length - T - L + j + 1))
    assert sorted(set(X.ravel())) == list(range(length - T))


# scaling


def test_scaler_round_trip_and_constant_column(rng):
    v = np.column_stack([rng.normal(4, 2, size=50), np.full(50, 3.0)])
    sc = Scaler.fit(v)
    assert sc.std[1] == 1.0
    assert np.allclose(sc.inverse(sc.transform(v)), v, atol=1e-12)
    assert np.allclose(sc.transform(v)[:, 0].mean(), 0, atol=1e-12)


# metrics


def test_metric_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0 and mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0 and mae([0.0, 2.0], [1.0, 1.0]) == 1.0
    assert mse([0.0, 0.0], [-2.0, 2.0]) == 4.0 and mae([0.0, 0.0], [-2.0, 2.0]) == 2.0


def test_signed_error_keeps_literal_formula():
    assert signed_me([0.0, 0.0], [-2.0, 2.0]) == 0.0


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


@given(st.permutations(list(range(6))))
def test_aggregation_is_permutation_invariant(perm):
    g = np.random.default_rng(0)
    y, p = g.normal(size=(6, 2, 5)), g.normal(size=(6, 2, 5))
    a, b = MetricAccumulator(), MetricAccumulator()
    a.update(y, p)
    for i in perm:
        b.update(y[i:i + 1], p[i:i + 1])
    assert a.result() == b.result()


def test_aggregate_matches_flat_mean(rng):
    y, p = rng.normal(size=(7, 3, 4)), rng.normal(size=(7, 3, 4))
    acc = MetricAccumulator()
    acc.update(y, p)
    m = acc.result()
    assert m.count == 7
    assert math.isclose(m.mse, mse(y, p), rel_tol=1e-14)
    assert math.isclose(m.mae, mae(y, p), rel_tol=1e-14)
