"""Loop-detector speed grids, spatial imputation and lagged regression designs.

A :class:`SpeedField` holds speeds on a sensors x time grid (sensors as rows,
time as columns).  Time is regular within each calendar day; whole days may
be absent (weekends, dropped days), so consecutive days need not be adjacent.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConflictError,
    DataError,
    EmptyResultError,
    GridError,
    IncompleteDataError,
    ParameterError,
    ParseError,
    WindowError,
)

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {"timestamp": "timestamp", "sensor_id": "sensor_id", "speed": "speed"}
_TS_FORMAT = "%Y-%m-%dT%H:%M:%S"


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpeedField:
    """Speeds (mi/h) for ``n_sensors`` sensors at regularly spaced instants.

    ``speeds`` holds NaN wherever ``missing`` is set.  ``imputed`` marks cells
    filled by :func:`impute_spatial`; they never serve as donors, which keeps
    imputation idempotent.
    """

    sensor_ids: tuple
    mileposts: np.ndarray
    timestamps: np.ndarray
    speeds: np.ndarray
    missing: np.ndarray
    day_labels: np.ndarray
    step_minutes: float = 5.0
    imputed: np.ndarray | None = None

    def __post_init__(self):
        sensor_ids = tuple(str(s) for s in self.sensor_ids)
        n = len(sensor_ids)
        if n < 1:
            raise DataError("a speed field needs at least one sensor")
        if len(set(sensor_ids)) != n:
            raise DataError("sensor ids must be unique")
        mileposts = np.asarray(self.mileposts, dtype=float)
        timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        speeds = np.asarray(self.speeds, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        day_labels = np.asarray(self.day_labels, dtype=np.int64)
        imputed = (np.zeros_like(missing) if self.imputed is None
                   else np.asarray(self.imputed, dtype=bool))
        T = timestamps.shape[0]
        if mileposts.shape != (n,):
            raise DataError("one milepost per sensor required")
        if n > 1:
            d = np.diff(mileposts)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise DataError("mileposts must be strictly monotone along the corridor")
        for name, arr in (("speeds", speeds), ("missing", missing), ("imputed", imputed)):
            if arr.shape != (n, T):
                raise DataError(f"{name} must have shape {(n, T)}, got {arr.shape}")
        if day_labels.shape != (T,):
            raise DataError("one day label per time column required")
        if self.step_minutes <= 0:
            raise DataError("time step must be positive")
        if T > 1:
            dts = np.diff(timestamps).astype(np.int64)
            if np.any(dts <= 0):
                raise GridError("timestamps must be strictly increasing")
            dlab = np.diff(day_labels)
            if np.any(dlab < 0):
                raise GridError("day labels must be non-decreasing")
            step_s = int(round(self.step_minutes * 60))
            same_day = dlab == 0
            if np.any(dts[same_day] != step_s):
                raise GridError("timestamps within a day must be equally spaced")
        present = ~missing
        if np.any(~np.isfinite(speeds[present])) or np.any(speeds[present] < 0):
            raise DataError("present speeds must be finite and non-negative")
        speeds = np.where(missing, np.nan, speeds)
        object.__setattr__(self, "sensor_ids", sensor_ids)
        object.__setattr__(self, "mileposts", _frozen(mileposts))
        object.__setattr__(self, "timestamps", _frozen(timestamps))
        object.__setattr__(self, "speeds", _frozen(speeds))
        object.__setattr__(self, "missing", _frozen(missing))
        object.__setattr__(self, "day_labels", _frozen(day_labels))
        object.__setattr__(self, "imputed", _frozen(imputed))
        object.__setattr__(self, "step_minutes", float(self.step_minutes))

    @property
    def n_sensors(self):
        return len(self.sensor_ids)

    @property
    def n_times(self):
        return self.timestamps.shape[0]

    @property
    def days(self):
        """Sorted distinct day labels."""
        return np.unique(self.day_labels)

    @property
    def n_missing(self):
        return int(self.missing.sum())

    def dates(self):
        """Calendar date of each day label, in label order."""
        out = []
        for lab in self.days:
            ts = self.timestamps[np.argmax(self.day_labels == lab)]
            out.append(ts.astype(dt.datetime).date())
        return out

    def day_slices(self):
        """List of ``(label, slice)`` covering the time axis, one per day."""
        labels = self.day_labels
        if labels.size == 0:
            return []
        edges = np.flatnonzero(np.diff(labels)) + 1
        starts = np.concatenate([[0], edges])
        stops = np.concatenate([edges, [labels.size]])
        return [(int(labels[a]), slice(int(a), int(b))) for a, b in zip(starts, stops)]

    def sensor_index(self, sensor):
        try:
            return self.sensor_ids.index(str(sensor))
        except ValueError:
            raise DataError(f"unknown sensor {sensor!r}") from None

    def missing_columns(self):
        """Time indices at which every sensor is missing (no donor exists)."""
        return np.flatnonzero(self.missing.all(axis=0))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_speeds(self, speeds):
        """Copy with new speed values; the missing mask follows NaNs."""
        speeds = np.asarray(speeds, dtype=float)
        return self.replace(speeds=speeds, missing=np.isnan(speeds))

    def equals(self, other):
        """Exact equality, NaN-aware for speeds."""
        if not isinstance(other, SpeedField):
            return False
        return (
            self.sensor_ids == other.sensor_ids
            and self.step_minutes == other.step_minutes
            and np.array_equal(self.mileposts, other.mileposts)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.day_labels, other.day_labels)
            and np.array_equal(self.speeds, other.speeds, equal_nan=True)
        )


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


def _day_index(timestamps):
    days = timestamps.astype("datetime64[D]")
    _, labels = np.unique(days, return_inverse=True)
    return labels.astype(np.int64)


def load_speed_csv(path, schema=None, sensors_path=None, step_minutes=None):
    """Read a long-format ``timestamp,sensor_id,speed`` file into a grid.

    Parameters
    ----------
    path : path-like
        CSV with one row per (sensor, timestamp).  An empty speed cell marks
        a missing reading.
    schema : dict, optional
        Maps the canonical names ``timestamp``, ``sensor_id`` and ``speed`` to
        the column names used in the file.
    sensors_path : path-like, optional
        ``sensor_id,milepost`` metadata; sensors are then ordered by milepost.
        Otherwise sensors keep their order of first appearance.
    step_minutes : float, optional
        Grid step.  Inferred from the smallest within-day spacing when omitted
        (5 minutes for single-instant files).

    Returns
    -------
    SpeedField
        Grid on the union of timestamps; timestamps absent for every sensor
        inside a day's span become fully missing columns.
    """
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(
        path,
        dtype=str,
        keep_default_na=False,
        skipinitialspace=True,
    )
    for key in ("timestamp", "sensor_id", "speed"):
        if cols[key] not in df.columns:
            raise ParseError(f"missing column {cols[key]!r} ({key})")
    raw_ts = df[cols["timestamp"]].str.strip()
    sensors = df[cols["sensor_id"]].str.strip()
    raw_speed = df[cols["speed"]].str.strip()

    ts = pd.to_datetime(raw_ts, format="ISO8601", errors="coerce")
    bad = ts.isna().to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise ParseError(f"malformed timestamp {raw_ts.iloc[i]!r}", row=i + 2)
    if getattr(ts.dt, "tz", None) is not None:
        ts = ts.dt.tz_localize(None)
    speed = pd.to_numeric(raw_speed.replace("", np.nan), errors="coerce")
    bad = (speed.isna() & (raw_speed != "")).to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise ParseError(f"malformed speed {raw_speed.iloc[i]!r}", row=i + 2)
    # pandas' default float parser is not round-trip exact
    speed_vals = np.array([float(s) if s != "" else np.nan for s in raw_speed], dtype=float)
    neg = speed_vals < 0
    if np.any(neg):
        i = int(np.argmax(neg))
        raise ParseError(f"negative speed {speed_vals[i]}", row=i + 2)

    ts_vals = ts.to_numpy().astype("datetime64[s]")
    key = pd.DataFrame({"s": sensors.to_numpy(), "t": ts_vals})
    dup = key.duplicated().to_numpy()
    if dup.any():
        i = int(np.argmax(dup))
        raise ConflictError(
            f"row {i + 2}: duplicate record for sensor {sensors.iloc[i]!r} at {ts_vals[i]}"
        )

    order = list(dict.fromkeys(sensors.tolist()))
    if sensors_path is not None:
        meta = pd.read_csv(sensors_path, dtype={"sensor_id": str})
        if not {"sensor_id", "milepost"} <= set(meta.columns):
            raise ParseError("sensor metadata needs columns sensor_id,milepost")
        mp = dict(zip(meta["sensor_id"].str.strip(), meta["milepost"].astype(float)))
        unknown = [s for s in order if s not in mp]
        if unknown:
            raise DataError(f"sensors without milepost: {unknown[:5]}")
        order = sorted(order, key=lambda s: mp[s])
        mileposts = np.array([mp[s] for s in order])
    else:
        mileposts = np.arange(len(order), dtype=float)

    grid, labels, step = _build_grid(np.unique(ts_vals), step_minutes)
    col = np.searchsorted(grid, ts_vals)
    row_of = {s: i for i, s in enumerate(order)}
    rows = np.array([row_of[s] for s in sensors])
    speeds = np.full((len(order), grid.size), np.nan)
    speeds[rows, col] = speed_vals
    return SpeedField(
        sensor_ids=tuple(order),
        mileposts=mileposts,
        timestamps=grid,
        speeds=speeds,
        missing=np.isnan(speeds),
        day_labels=labels,
        step_minutes=step,
    )


def _build_grid(unique_ts, step_minutes):
    days = unique_ts.astype("datetime64[D]")
    if step_minutes is None:
        same = days[1:] == days[:-1]
        diffs = np.diff(unique_ts).astype(np.int64)[same]
        step_s = int(diffs.min()) if diffs.size else 300
    else:
        step_s = int(round(step_minutes * 60))
    if step_s <= 0:
        raise GridError("time step must be positive")
    pieces = []
    for day in np.unique(days):
        members = unique_ts[days == day]
        offs = (members - members[0]).astype(np.int64)
        if np.any(offs % step_s):
            raise GridError(f"timestamps on {day} are not on a {step_s // 60}-minute grid")
        n = int(offs[-1] // step_s) + 1
        pieces.append(members[0] + np.arange(n) * np.timedelta64(step_s, "s"))
    grid = np.concatenate(pieces).astype("datetime64[s]")
    return grid, _day_index(grid), step_s / 60.0


def _fmt(v):
    return "" if np.isnan(v) else repr(float(v))


def write_speed_csv(field, path):
    """Long-format export readable by :func:`load_speed_csv`.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    ts = [t.astype(dt.datetime).strftime(_TS_FORMAT) for t in field.timestamps]
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,sensor_id,speed\n")
        for j, t in enumerate(ts):
            for i, s in enumerate(field.sensor_ids):
                fh.write(f"{t},{s},{_fmt(field.speeds[i, j])}\n")


def write_sensor_csv(field, path):
    with open(path, "w", newline="") as fh:
        fh.write("sensor_id,milepost\n")
        for s, m in zip(field.sensor_ids, field.mileposts):
            fh.write(f"{s},{float(m)!r}\n")


def write_wide_csv(field, path, speeds=None):
    """Time x sensor grid (sensors ordered by milepost), for heatmaps."""
    values = field.speeds if speeds is None else np.asarray(speeds, dtype=float)
    order = np.argsort(field.mileposts, kind="stable")
    ts = [t.astype(dt.datetime).strftime(_TS_FORMAT) for t in field.timestamps]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["timestamp"] + [field.sensor_ids[i] for i in order]) + "\n")
        for j, t in enumerate(ts):
            fh.write(",".join([t] + [_fmt(values[i, j]) for i in order]) + "\n")


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


def impute_spatial(field):
    """Fill missing cells from adjacent sensors at the same instant.

    Interior cells take the mean of both neighbours when both were observed,
    otherwise the single observed neighbour; boundary sensors copy their
    only neighbour.  Only originally observed cells act as donors.  Columns
    with no donor stay missing (see :meth:`SpeedField.missing_columns`).
    """
    s = field.speeds
    donor = ~field.missing & ~field.imputed
    n = field.n_sensors
    if n == 1 or not field.missing.any():
        return field
    up = np.full_like(s, np.nan)
    down = np.full_like(s, np.nan)
    up[1:] = np.where(donor[:-1], s[:-1], np.nan)
    down[:-1] = np.where(donor[1:], s[1:], np.nan)
    both = ~np.isnan(up) & ~np.isnan(down)
    fill = np.where(both, 0.5 * (up + down), np.where(np.isnan(up), down, up))
    target = field.missing & ~np.isnan(fill)
    speeds = np.where(target, fill, s)
    out = field.replace(
        speeds=speeds,
        missing=field.missing & ~target,
        imputed=field.imputed | target,
    )
    if out.missing.any():
        logger.info("spatial imputation left %d cells missing (%d empty columns)",
                    out.n_missing, out.missing_columns().size)
    return out


_WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


def _resolve_excludes(field, excludes):
    dates = field.dates()
    labels = field.days
    drop = set()
    for item in excludes:
        if isinstance(item, str) and item.lower() in ("weekend", "weekends"):
            drop.update(int(l) for l, d in zip(labels, dates) if d.weekday() >= 5)
        elif isinstance(item, str) and item.lower() in _WEEKDAYS:
            wd = _WEEKDAYS.index(item.lower())
            drop.update(int(l) for l, d in zip(labels, dates) if d.weekday() == wd)
        elif isinstance(item, (int, np.integer)):
            drop.add(int(item))
        else:
            day = item if isinstance(item, dt.date) else dt.date.fromisoformat(str(item))
            drop.update(int(l) for l, d in zip(labels, dates) if d == day)
    return drop


def drop_bad_days(field, max_missing_frac=0.0, calendar_excludes=()):
    """Remove days with too many missing cells or listed in ``calendar_excludes``.

    ``calendar_excludes`` may mix ISO date strings, :class:`datetime.date`
    objects, integer day labels, weekday names and the keyword ``"weekends"``.
    Remaining days are relabelled ``0..D-1``.
    """
    if not 0.0 <= max_missing_frac <= 1.0:
        raise ParameterError("max_missing_frac must lie in [0, 1]")
    drop = _resolve_excludes(field, calendar_excludes)
    keep = np.zeros(field.n_times, dtype=bool)
    for label, sl in field.day_slices():
        frac = field.missing[:, sl].mean()
        if label not in drop and frac <= max_missing_frac:
            keep[sl] = True
    if not keep.any():
        raise EmptyResultError("every day was removed")
    kept_labels = field.day_labels[keep]
    _, relabel = np.unique(kept_labels, return_inverse=True)
    return field.replace(
        timestamps=field.timestamps[keep],
        speeds=field.speeds[:, keep],
        missing=field.missing[:, keep],
        imputed=field.imputed[:, keep],
        day_labels=relabel,
    )


# ---------------------------------------------------------------------------
# Lagged designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LagDesign:
    """Supervised design for an ``h``-step-ahead forecast from ``k`` lags.

    Column ``j`` of ``X`` holds sensor ``column_map[j][0]`` at lag
    ``column_map[j][1]`` (lag 0 is the issue time ``t``).  When ``center`` and
    ``scale`` are set, ``X`` is standardized and ``raw_X()`` undoes it.  The
    targets ``y`` are always in original units.
    """

    X: np.ndarray
    y: np.ndarray
    k: int
    h: int
    target_sensors: tuple
    column_map: tuple
    row_days: np.ndarray
    row_times: np.ndarray
    timestamps: np.ndarray
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    step_minutes: float = 5.0

    @property
    def n_rows(self):
        return self.X.shape[0]

    @property
    def standardized(self):
        return self.center is not None

    @property
    def days(self):
        return np.unique(self.row_days)

    def raw_X(self):
        if not self.standardized:
            return self.X
        return self.X * self.scale + self.center

    def target_times(self):
        """Timestamp each target value refers to (issue time + h steps)."""
        return self.timestamps + np.timedelta64(int(round(self.h * self.step_minutes * 60)), "s")

    def take_rows(self, mask):
        mask = np.asarray(mask)
        return dataclasses.replace(
            self,
            X=self.X[mask],
            y=self.y[mask],
            row_days=self.row_days[mask],
            row_times=self.row_times[mask],
            timestamps=self.timestamps[mask],
        )

    def take_columns(self, columns):
        """Keep only the given column indices (in the given order)."""
        idx = np.asarray(columns, dtype=int)
        return dataclasses.replace(
            self,
            X=self.X[:, idx],
            column_map=tuple(self.column_map[i] for i in idx),
            center=None if self.center is None else self.center[idx],
            scale=None if self.scale is None else self.scale[idx],
        )

    def standardize_with(self, center, scale):
        """Re-express ``X`` with the given column statistics."""
        raw = self.raw_X()
        return dataclasses.replace(self, X=(raw - center) / scale,
                                   center=np.asarray(center, float),
                                   scale=np.asarray(scale, float))

    def column_index(self, sensor, lag):
        try:
            return self.column_map.index((str(sensor), int(lag)))
        except ValueError:
            raise DataError(f"design has no column for ({sensor!r}, lag {lag})") from None


def column_stats(X):
    """Column means and population standard deviations (zero std -> 1)."""
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return center, scale


def build_lag_design(field, k=12, h=8, targets=None, standardize=True):
    """Stack ``k`` lagged speeds of every sensor to predict ``targets`` ``h`` steps ahead.

    Rows are issued at every ``t`` of a day with ``t - k + 1 >= 0`` and
    ``t + h`` inside the same day, so a day of ``L`` steps yields
    ``L - k - h + 1`` rows and no window crosses a day boundary.
    Columns are ordered lag-major: all sensors at lag 0, then lag 1, ...
    """
    k, h = int(k), int(h)
    if k < 1 or h < 1:
        raise ParameterError("need k >= 1 and h >= 1")
    if targets is None:
        targets = field.sensor_ids
    elif isinstance(targets, str):
        targets = [targets]
    tidx = [field.sensor_index(s) for s in targets]
    n = field.n_sensors
    Xs, ys, days, times = [], [], [], []
    for label, sl in field.day_slices():
        S = field.speeds[:, sl]
        L = S.shape[1]
        if L < k + h:
            raise WindowError(f"day {label} has {L} steps, fewer than k + h = {k + h}")
        _check_complete(field, sl.start, range(0, L - h), range(n))
        _check_complete(field, sl.start, range(k - 1 + h, L), tidx)
        m = L - k - h + 1
        block = np.empty((m, n * k))
        for lag in range(k):
            block[:, lag * n:(lag + 1) * n] = S[:, k - 1 - lag:k - 1 - lag + m].T
        Xs.append(block)
        ys.append(S[tidx, k - 1 + h:k - 1 + h + m].T)
        days.append(np.full(m, label))
        times.append(sl.start + np.arange(k - 1, k - 1 + m))
    X = np.vstack(Xs)
    row_times = np.concatenate(times)
    design = LagDesign(
        X=X,
        y=np.vstack(ys),
        k=k,
        h=h,
        target_sensors=tuple(field.sensor_ids[i] for i in tidx),
        column_map=tuple((field.sensor_ids[i], lag) for lag in range(k) for i in range(n)),
        row_days=np.concatenate(days),
        row_times=row_times,
        timestamps=field.timestamps[row_times],
        step_minutes=field.step_minutes,
    )
    if standardize:
        center, scale = column_stats(X)
        design = design.standardize_with(center, scale)
    return design


def _check_complete(field, offset, cols, rows):
    cols = np.asarray(list(cols), dtype=int) + offset
    rows = np.asarray(list(rows), dtype=int)
    if cols.size == 0 or rows.size == 0:
        return
    sub = field.missing[np.ix_(rows, cols)]
    if sub.any():
        r, c = np.argwhere(sub)[0]
        raise IncompleteDataError(field.sensor_ids[rows[r]], field.timestamps[cols[c]])


def split_train_test(design, policy="first_half_days"):
    """Partition rows by whole days.

    ``policy`` is ``"first_half_days"`` (the first ``D // 2`` days train) or
    an explicit collection of training day labels; remaining days test.
    If ``design`` is standardized, both halves are re-standardized with
    statistics from the training rows only.
    """
    days = design.days
    if days.size < 2:
        raise DataError("need at least two distinct days to split")
    if isinstance(policy, str):
        if policy != "first_half_days":
            raise ParameterError(f"unknown split policy {policy!r}")
        train_days = days[: days.size // 2]
    else:
        train_days = np.asarray(sorted(int(d) for d in policy), dtype=np.int64)
        unknown = np.setdiff1d(train_days, days)
        if unknown.size:
            raise DataError(f"split names unknown day(s) {unknown.tolist()}")
        if train_days.size in (0, days.size):
            raise DataError("split must leave at least one day on each side")
    mask = np.isin(design.row_days, train_days)
    train, test = design.take_rows(mask), design.take_rows(~mask)
    if design.standardized:
        center, scale = column_stats(train.raw_X())
        train = train.standardize_with(center, scale)
        test = test.standardize_with(center, scale)
    return train, test


def split_tail_days(design, frac=0.25):
    """Hold out the last ``frac`` of a design's days (at least one) for validation."""
    days = design.days
    if days.size < 2:
        raise DataError("need at least two days for a validation split")
    n_valid = min(days.size - 1, max(1, int(round(frac * days.size))))
    return split_train_test(design, days[: days.size - n_valid])
