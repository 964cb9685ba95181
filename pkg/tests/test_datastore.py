import datetime as dt
import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trafficdl.datastore import (
    SpeedField,
    build_lag_design,
    drop_bad_days,
    impute_spatial,
    load_speed_csv,
    split_train_test,
    write_sensor_csv,
    write_speed_csv,
    write_wide_csv,
)
from trafficdl.errors import (
    ConflictError,
    DataError,
    EmptyResultError,
    GridError,
    IncompleteDataError,
    ParseError,
    WindowError,
)


def make_field(speeds, start="2013-01-07", step=5, days=None):
    speeds = np.asarray(speeds, float)
    n, T = speeds.shape
    if days is None:
        days = np.zeros(T, dtype=int)
    days = np.asarray(days)
    base = np.datetime64(start, "s")
    ts = np.empty(T, dtype="datetime64[s]")
    for j in range(T):
        within = j - np.argmax(days == days[j])
        ts[j] = base + np.timedelta64(int(days[j]), "D") + np.timedelta64(step * 60 * within, "s")
    return SpeedField(
        sensor_ids=tuple(f"s{i}" for i in range(n)),
        mileposts=np.arange(n, dtype=float),
        timestamps=ts,
        speeds=speeds,
        missing=np.isnan(speeds),
        day_labels=days,
        step_minutes=step,
    )


def write_long(path, rows):
    path.write_text("timestamp,sensor_id,speed\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))


# --- loading -----------------------------------------------------------------


def test_load_full_corridor_day(tmp_path):
    rng = np.random.default_rng(1)
    rows = []
    base = dt.datetime(2013, 3, 4)
    for j in range(288):
        t = (base + dt.timedelta(minutes=5 * j)).isoformat()
        for i in range(21):
            rows.append((t, f"D{i:02d}", f"{rng.uniform(10, 70):.2f}"))
    p = tmp_path / "speeds.csv"
    write_long(p, rows)
    f = load_speed_csv(p)
    assert f.n_sensors == 21 and f.n_times == 288
    assert f.step_minutes == 5.0
    assert f.n_missing == 0


def test_load_single_cell(tmp_path):
    p = tmp_path / "one.csv"
    write_long(p, [("2013-01-01T00:00:00", "A", "55.5")])
    f = load_speed_csv(p)
    assert f.speeds.shape == (1, 1)
    assert f.speeds[0, 0] == 55.5
    assert not f.missing.any()


def test_load_absent_cell_is_missing(tmp_path):
    p = tmp_path / "gap.csv"
    write_long(p, [
        ("2013-01-01T00:00:00", "A", "50"), ("2013-01-01T00:00:00", "B", "51"),
        ("2013-01-01T00:05:00", "A", "52"),
        ("2013-01-01T00:10:00", "A", "53"), ("2013-01-01T00:10:00", "B", ""),
    ])
    f = load_speed_csv(p)
    expected = np.array([[False, False, False], [False, True, True]])
    np.testing.assert_array_equal(f.missing, expected)


def test_load_orders_by_milepost(tmp_path):
    p = tmp_path / "s.csv"
    write_long(p, [("2013-01-01T00:00:00", "far", "1"), ("2013-01-01T00:00:00", "near", "2")])
    meta = tmp_path / "m.csv"
    meta.write_text("sensor_id,milepost\nfar,9.5\nnear,1.0\n")
    f = load_speed_csv(p, sensors_path=meta)
    assert f.sensor_ids == ("near", "far")
    np.testing.assert_array_equal(f.speeds[:, 0], [2.0, 1.0])


def test_load_custom_schema(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("when,det,v\n2013-01-01T00:00:00,A,10\n")
    f = load_speed_csv(p, schema={"timestamp": "when", "sensor_id": "det", "speed": "v"})
    assert f.speeds[0, 0] == 10


def test_malformed_timestamp_reports_row(tmp_path):
    p = tmp_path / "bad.csv"
    write_long(p, [("2013-01-01T00:00:00", "A", "1"), ("yesterday", "A", "2")])
    with pytest.raises(ParseError) as err:
        load_speed_csv(p)
    assert err.value.row == 3


def test_duplicate_record_is_conflict(tmp_path):
    p = tmp_path / "dup.csv"
    write_long(p, [("2013-01-01T00:00:00", "A", "1"), ("2013-01-01T00:00:00", "A", "2")])
    with pytest.raises(ConflictError):
        load_speed_csv(p)


def test_off_grid_timestamp_is_grid_error(tmp_path):
    p = tmp_path / "grid.csv"
    write_long(p, [("2013-01-01T00:00:00", "A", "1"), ("2013-01-01T00:05:00", "A", "1"),
                   ("2013-01-01T00:12:00", "A", "1")])
    with pytest.raises(GridError):
        load_speed_csv(p)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_speed_csv(tmp_path / "nope.csv")


def test_field_rejects_negative_speed():
    with pytest.raises(DataError):
        make_field([[1.0, -2.0]])


def test_field_rejects_non_monotone_mileposts():
    f = make_field(np.ones((3, 2)))
    with pytest.raises(DataError):
        f.replace(mileposts=np.array([0.0, 2.0, 1.0]))


def test_round_trip_is_bit_exact(tmp_path, small_field):
    rng = np.random.default_rng(5)
    speeds = small_field.speeds + rng.uniform(0, 1e-9, small_field.speeds.shape)
    speeds[2, 17] = np.nan
    f = small_field.with_speeds(speeds)
    p, m = tmp_path / "rt.csv", tmp_path / "rt_sensors.csv"
    write_speed_csv(f, p)
    write_sensor_csv(f, m)
    g = load_speed_csv(p, sensors_path=m)
    assert g.equals(f)


@given(st.lists(st.floats(0, 200, allow_nan=False), min_size=6, max_size=6))
def test_round_trip_property(tmp_path_factory, values):
    f = make_field(np.reshape(values, (2, 3)))
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    write_speed_csv(f, p)
    g = load_speed_csv(p)
    np.testing.assert_array_equal(g.speeds, f.speeds)


def test_wide_export(tmp_path):
    f = make_field([[1.0, 2.0], [3.0, np.nan]])
    p = tmp_path / "w.csv"
    write_wide_csv(f, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "timestamp,s0,s1"
    assert lines[2].endswith(",2.0,")


# --- imputation ----------------------------------------------------------------


def test_impute_interior_mean():
    f = make_field([[60.0], [np.nan], [40.0]])
    g = impute_spatial(f)
    assert g.speeds[1, 0] == 50.0
    assert not g.missing.any()


def test_impute_boundary_copies_neighbour():
    g = impute_spatial(make_field([[np.nan], [33.0], [40.0]]))
    assert g.speeds[0, 0] == 33.0


def test_impute_noop_without_missing(small_field):
    assert impute_spatial(small_field).equals(small_field)


def test_impute_leaves_empty_column():
    f = make_field([[1.0, np.nan], [2.0, np.nan]])
    g = impute_spatial(f)
    assert g.missing[:, 1].all()
    np.testing.assert_array_equal(g.missing_columns(), [1])


@given(st.lists(st.one_of(st.none(), st.floats(0, 100)), min_size=12, max_size=12))
def test_impute_idempotent(cells):
    s = np.array([np.nan if c is None else c for c in cells]).reshape(4, 3)
    once = impute_spatial(make_field(s))
    twice = impute_spatial(once)
    assert twice.equals(once)
    observed = ~np.isnan(s)
    np.testing.assert_array_equal(once.speeds[observed], s[observed])


# --- day dropping ----------------------------------------------------------------


def _days_field(n_days, start="2013-01-07"):
    days = np.repeat(np.arange(n_days), 4)
    return make_field(np.full((2, 4 * n_days), 50.0), start=start, days=days)


def test_drop_fully_missing_day():
    f = _days_field(3)
    s = f.speeds.copy()
    s[:, 4:8] = np.nan
    g = drop_bad_days(f.with_speeds(s), max_missing_frac=0.5)
    assert g.days.tolist() == [0, 1]
    assert g.n_times == 8


def test_drop_noop_bound():
    f = _days_field(3)
    assert drop_bad_days(f, 1.0, []).equals(f)


def test_drop_weekends():
    f = _days_field(7, start="2013-01-07")  # a Monday
    g = drop_bad_days(f, 1.0, ["weekends"])
    assert g.days.size == 5
    assert all(d.weekday() < 5 for d in g.dates())


def test_drop_named_date_and_label():
    f = _days_field(4)
    g = drop_bad_days(f, 1.0, ["2013-01-08", 3])
    assert [d.isoformat() for d in g.dates()] == ["2013-01-07", "2013-01-09"]


def test_drop_everything_is_error():
    with pytest.raises(EmptyResultError):
        drop_bad_days(_days_field(2), 1.0, ["weekends", "monday", "tuesday"])


# --- lag designs -------------------------------------------------------------------


def test_rows_per_day_by_enumeration(small_field):
    k, h, L = 12, 8, 288
    valid = [t for t in range(L) if t - (k - 1) >= 0 and t + h <= L - 1]
    design = build_lag_design(small_field, k=k, h=h, targets=["S03"])
    assert design.n_rows == len(valid) * small_field.days.size
    assert design.X.shape[1] == small_field.n_sensors * k


def test_corridor_design_shape():
    from trafficdl.synthgen import CorridorParams, gen_dataset

    f = gen_dataset(CorridorParams(), 1)
    d = build_lag_design(f, k=12, h=8, targets=["S11"])
    assert d.X.shape == (269, 252)


def test_smallest_window():
    f = make_field([[1.0, 2.0, 3.0]])
    d = build_lag_design(f, k=1, h=1, standardize=False)
    np.testing.assert_array_equal(d.X, [[1.0], [2.0]])
    np.testing.assert_array_equal(d.y, [[2.0], [3.0]])


def test_lag_columns_hold_the_right_values(small_field):
    d = build_lag_design(small_field, k=3, h=2, standardize=False)
    r = 10
    t = d.row_times[r]
    for j, (sensor, lag) in enumerate(d.column_map):
        i = small_field.sensor_index(sensor)
        assert d.X[r, j] == small_field.speeds[i, t - lag]
    assert d.y[r, 0] == small_field.speeds[0, t + 2]


def test_standardized_columns(small_field):
    d = build_lag_design(small_field, k=4, h=2)
    np.testing.assert_allclose(d.X.mean(0), 0, atol=1e-9)
    np.testing.assert_allclose(d.X.var(0), 1, atol=1e-9)
    np.testing.assert_allclose(d.raw_X(), build_lag_design(small_field, 4, 2, standardize=False).X,
                               atol=1e-9)


@given(k=st.integers(1, 6), h=st.integers(1, 6))
def test_column_map_bijection(small_field, k, h):
    d = build_lag_design(small_field, k=k, h=h, standardize=False)
    expected = set(itertools.product(small_field.sensor_ids, range(k)))
    assert len(d.column_map) == len(expected) == d.X.shape[1]
    assert set(d.column_map) == expected


def test_rows_never_straddle_days(small_field):
    d = build_lag_design(small_field, k=6, h=3, standardize=False)
    for t, day in zip(d.row_times, d.row_days):
        assert small_field.day_labels[t - 5] == day
        assert small_field.day_labels[t + 3] == day


def test_missing_cell_named():
    s = np.full((2, 10), 50.0)
    s[1, 4] = np.nan
    with pytest.raises(IncompleteDataError) as err:
        build_lag_design(make_field(s), k=2, h=1)
    assert err.value.sensor == "s1"


def test_window_too_long():
    with pytest.raises(WindowError):
        build_lag_design(make_field(np.ones((1, 5))), k=3, h=3)


# --- splits ----------------------------------------------------------------------


def test_first_half_split():
    from trafficdl.synthgen import CorridorParams, gen_dataset

    f = gen_dataset(CorridorParams(n_sensors=3, bottleneck=2, queue_length=(1, 1)), 6)
    d = build_lag_design(f, k=2, h=1)
    tr, te = split_train_test(d)
    assert tr.days.tolist() == [0, 1, 2] and te.days.tolist() == [3, 4, 5]
    np.testing.assert_allclose(tr.X.mean(0), 0, atol=1e-9)
    assert not np.allclose(te.X.mean(0), 0, atol=1e-6)


def test_two_day_split():
    d = build_lag_design(_days_field(2), k=1, h=1, standardize=False)
    tr, te = split_train_test(d)
    assert tr.days.tolist() == [0] and te.days.tolist() == [1]


def test_split_unknown_day():
    d = build_lag_design(_days_field(4), k=1, h=1, standardize=False)
    with pytest.raises(DataError):
        split_train_test(d, [5])


@given(st.sets(st.integers(0, 5), min_size=1, max_size=5))
def test_split_partitions_days(train_days):
    d = build_lag_design(_days_field(6), k=1, h=1, standardize=False)
    tr, te = split_train_test(d, train_days)
    assert set(tr.days) == train_days
    assert set(tr.days).isdisjoint(te.days)
    assert set(tr.days) | set(te.days) == set(d.days)
    assert tr.n_rows + te.n_rows == d.n_rows
