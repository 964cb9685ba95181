"""Synthetic corridor speeds with recurrent breakdowns, upstream queue growth,
evening special events and corridor-wide weather slowdowns.

Sensors are indexed in the direction of travel, so "upstream" of the
bottleneck means a lower index.  A congestion episode starts at the
bottleneck and reaches a sensor ``d`` positions upstream ``d / wave_speed``
steps later; recovery travels the same way.  Transitions are smoothstep
ramps over ``transition_steps`` steps, so plateaus hit their regime values
exactly when noise is off.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .datastore import SpeedField
from .errors import ParameterError
from .seeding import derive_seed

STEPS_PER_DAY = 288
STEP_MINUTES = 5.0
DAY_TYPES = ("normal", "event", "weather")

# regime codes in DaySchedule.regime
FREE, TRANSITION, CONGESTED = 0, 1, 2


@dataclass(frozen=True)
class CorridorParams:
    n_sensors: int = 21
    free_flow_speed: float = 70.0
    congested_speed: float = 20.0
    bottleneck: int = 15  # 1-based
    queue_length: tuple = (8, 14)  # sensors upstream reached by the morning queue
    breakdown_hour: float = 6.5
    recovery_hour: float = 9.5
    clock_jitter_hours: float = 0.5
    wave_speed: float = 0.5  # sensors per step
    wave_jitter: float = 0.3  # relative, per day
    transition_steps: int = 3
    congested_jitter: float = 4.0  # per-day shift of the congested level, mi/h
    breakdown_prob: float = 0.85
    noise_sd: float = 3.0
    event_prob: float = 0.05  # chance of an incident on any day
    event_magnitude: float = 1.0  # share of the free/congested gap lost in an event
    event_hours: tuple = (16.5, 18.5)
    weather_drop: float = 25.0
    weather_hours: tuple = (4.0, 14.0)
    start_date: str = "2013-01-01"
    seed: int = 0

    def __post_init__(self):
        if self.n_sensors < 1:
            raise ParameterError("n_sensors must be at least 1")
        if not 0 < self.congested_speed < self.free_flow_speed:
            raise ParameterError("need 0 < congested_speed < free_flow_speed")
        if not 1 <= self.bottleneck <= self.n_sensors:
            raise ParameterError("bottleneck must lie in 1..n_sensors")
        if self.wave_speed <= 0:
            raise ParameterError("wave_speed must be positive")
        if not 0 <= self.wave_jitter < 1:
            raise ParameterError("wave_jitter must lie in [0, 1)")
        if self.noise_sd < 0 or self.transition_steps < 1:
            raise ParameterError("invalid noise or transition settings")
        if self.congested_speed - self.congested_jitter <= 0:
            raise ParameterError("congested level may not reach zero")
        object.__setattr__(self, "queue_length", tuple(self.queue_length))
        object.__setattr__(self, "event_hours", tuple(self.event_hours))
        object.__setattr__(self, "weather_hours", tuple(self.weather_hours))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def max_speed(self):
        return self.free_flow_speed + 4.0 * self.noise_sd


@dataclass
class Episode:
    """One congestion episode: onset/offset step per sensor (NaN = unaffected)."""

    kind: str
    onset: np.ndarray
    offset: np.ndarray
    level: float


@dataclass
class DaySchedule:
    day_type: str
    episodes: list = field(default_factory=list)
    weather_window: tuple | None = None
    regime: np.ndarray | None = None  # [n_sensors x steps] FREE/TRANSITION/CONGESTED

    def first_congested_step(self, sensor):
        """First step at which a 0-based sensor is fully congested (or None)."""
        hits = np.flatnonzero(self.regime[sensor] == CONGESTED)
        return int(hits[0]) if hits.size else None


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _episode(params, rng, kind, start_hour, end_hour, reach, level, origin):
    n = params.n_sensors
    wave = params.wave_speed * (1.0 + params.wave_jitter * rng.uniform(-1, 1))
    on0 = start_hour * 60.0 / STEP_MINUTES
    off0 = end_hour * 60.0 / STEP_MINUTES
    onset = np.full(n, np.nan)
    offset = np.full(n, np.nan)
    for i in range(n):
        d = origin - i  # positions upstream of the origin
        if 0 <= d <= reach:
            delay = d / wave if math.isfinite(wave) else 0.0
            onset[i] = on0 + delay
            offset[i] = off0 + delay
    return Episode(kind, onset, offset, level)


def gen_day(params, day_type="normal", rng=None):
    """Speeds ``[n_sensors x 288]`` for one day and the regime schedule behind them."""
    if day_type not in DAY_TYPES:
        raise ParameterError(f"unknown day type {day_type!r}")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    n, L = params.n_sensors, STEPS_PER_DAY
    b = params.bottleneck - 1
    free, cong = params.free_flow_speed, params.congested_speed
    jit = params.clock_jitter_hours
    sched = DaySchedule(day_type)
    level = cong + params.congested_jitter * rng.uniform(-1, 1)

    if rng.random() < params.breakdown_prob:
        reach = int(rng.integers(params.queue_length[0], params.queue_length[1] + 1))
        start = params.breakdown_hour + jit * rng.uniform(-1, 1)
        end = max(start + 0.5, params.recovery_hour + jit * rng.uniform(-1, 1))
        sched.episodes.append(_episode(params, rng, "morning", start, end, reach, level, b))
    if day_type == "event":
        e0, e1 = params.event_hours
        start = e0 + 0.5 * jit * rng.uniform(-1, 1)
        end = max(start + 0.5, e1 + 0.5 * jit * rng.uniform(-1, 1))
        ev_level = free - params.event_magnitude * (free - level)
        reach = int(rng.integers(params.queue_length[0], params.queue_length[1] + 1))
        sched.episodes.append(_episode(params, rng, "event", start, end, reach, ev_level, b))
    if rng.random() < params.event_prob:
        origin = int(rng.integers(n))
        start = rng.uniform(10.0, 20.0)
        end = start + rng.uniform(0.5, 1.5)
        reach = int(rng.integers(1, 6))
        ev_level = free - params.event_magnitude * (free - level)
        sched.episodes.append(_episode(params, rng, "incident", start, end, reach, ev_level,
                                       origin))

    t = np.arange(L, dtype=float)
    T = float(params.transition_steps)
    drop = np.zeros((n, L))
    regime = np.zeros((n, L), dtype=np.int8)
    for ep in sched.episodes:
        for i in np.flatnonzero(np.isfinite(ep.onset)):
            c = _smoothstep((t - ep.onset[i]) / T) * (1.0 - _smoothstep((t - ep.offset[i]) / T))
            depth = (free - ep.level) * c
            drop[i] = np.maximum(drop[i], depth)
            inside = c > 0
            regime[i, inside] = np.maximum(regime[i, inside],
                                           np.where(c[inside] >= 1.0, CONGESTED, TRANSITION))
    speeds = free - drop
    if day_type == "weather":
        w0, w1 = params.weather_hours
        start = rng.uniform(w0, w1 - 2.0) * 60.0 / STEP_MINUTES
        end = start + rng.uniform(2.0, 6.0) * 60.0 / STEP_MINUTES
        sched.weather_window = (float(start), float(end))
        w = _smoothstep((t - start) / T) * (1.0 - _smoothstep((t - end) / T))
        speeds = np.minimum(speeds, free - params.weather_drop * w[None, :])
    if params.noise_sd > 0:
        speeds = speeds + rng.normal(0.0, params.noise_sd, size=speeds.shape)
    speeds = np.clip(speeds, 0.0, params.max_speed)
    sched.regime = regime
    return speeds, sched


def _parse_mix(mix):
    if mix is None:
        mix = {"normal": 1.0}
    if isinstance(mix, str):
        parts = {}
        for item in mix.split(","):
            k, _, v = item.partition("=")
            parts[k.strip()] = float(v)
        mix = parts
    unknown = set(mix) - set(DAY_TYPES)
    if unknown:
        raise ParameterError(f"unknown day types in mix: {sorted(unknown)}")
    probs = np.array([float(mix.get(k, 0.0)) for k in DAY_TYPES])
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ParameterError("mix fractions must be non-negative and sum to 1")
    return probs


def gen_dataset(params, n_days, mix=None, seed=None, return_schedules=False):
    """Concatenate ``n_days`` generated days on consecutive calendar dates.

    Day types are drawn independently with probabilities ``mix`` (a mapping or
    ``"normal=0.8,event=0.1,weather=0.1"``).  Every day has its own random
    stream derived from ``seed`` (default ``params.seed``).
    """
    if n_days < 1:
        raise ParameterError("n_days must be at least 1")
    probs = _parse_mix(mix)
    seed = params.seed if seed is None else int(seed)
    type_rng = np.random.default_rng(derive_seed(seed, "day-types"))
    kinds = type_rng.choice(len(DAY_TYPES), size=n_days, p=probs)
    n, L = params.n_sensors, STEPS_PER_DAY
    speeds = np.empty((n, n_days * L))
    schedules = []
    for d in range(n_days):
        rng = np.random.default_rng(derive_seed(seed, "day", d))
        s, sched = gen_day(params, DAY_TYPES[kinds[d]], rng)
        speeds[:, d * L:(d + 1) * L] = s
        schedules.append(sched)
    start = np.datetime64(params.start_date, "s")
    step = np.timedelta64(int(STEP_MINUTES * 60), "s")
    timestamps = start + step * np.arange(n_days * L)
    width = max(2, len(str(n)))
    field_ = SpeedField(
        sensor_ids=tuple(f"S{i + 1:0{width}d}" for i in range(n)),
        mileposts=np.linspace(0.0, 13.0, n) if n > 1 else np.zeros(1),
        timestamps=timestamps,
        speeds=speeds,
        missing=np.zeros_like(speeds, dtype=bool),
        day_labels=np.repeat(np.arange(n_days), L),
        step_minutes=STEP_MINUTES,
    )
    if return_schedules:
        return field_, schedules
    return field_
