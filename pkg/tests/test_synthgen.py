import numpy as np
import pytest
from hypothesis import given, strategies as st

from trafficdl.errors import ParameterError
from trafficdl.synthgen import (
    CONGESTED,
    STEPS_PER_DAY,
    CorridorParams,
    gen_dataset,
    gen_day,
)

QUIET = dict(noise_sd=0.0, event_prob=0.0, breakdown_prob=1.0, wave_jitter=0.0)


def test_noiseless_day_takes_regime_values():
    p = CorridorParams(**QUIET)
    speeds, sched = gen_day(p, "normal", np.random.default_rng(0))
    level = sched.episodes[0].level
    free = p.free_flow_speed
    plateau = sched.regime == CONGESTED
    np.testing.assert_allclose(speeds[plateau], level, atol=1e-12)
    np.testing.assert_array_equal(speeds[sched.regime == 0], free)
    trans = sched.regime == 1
    assert np.all((speeds[trans] > level - 1e-12) & (speeds[trans] < free))


def test_infinite_wave_speed_breaks_down_together():
    p = CorridorParams(**{**QUIET, "wave_speed": np.inf})
    _, sched = gen_day(p, "normal", np.random.default_rng(1))
    onset = sched.episodes[0].onset
    hit = onset[np.isfinite(onset)]
    assert hit.size > 1 and np.all(hit == hit[0])


@pytest.mark.parametrize("seed", range(5))
def test_queue_reaches_upstream_at_wave_speed(seed):
    p = CorridorParams(**{**QUIET, "queue_length": (10, 12)})
    _, sched = gen_day(p, "normal", np.random.default_rng(seed))
    b = p.bottleneck - 1
    gap = sched.first_congested_step(b - 5) - sched.first_congested_step(b)
    assert abs(gap - 5 / p.wave_speed) <= 1


def test_downstream_of_bottleneck_stays_free():
    p = CorridorParams(**QUIET)
    speeds, _ = gen_day(p, "normal", np.random.default_rng(2))
    np.testing.assert_array_equal(speeds[p.bottleneck:], p.free_flow_speed)


def test_event_day_has_evening_window():
    p = CorridorParams(**{**QUIET, "breakdown_prob": 0.0})
    speeds, sched = gen_day(p, "event", np.random.default_rng(3))
    assert [e.kind for e in sched.episodes] == ["event"]
    evening = slice(int(16 * 12), int(19.5 * 12))
    assert speeds[p.bottleneck - 1, evening].min() < p.free_flow_speed - 20


def test_weather_slows_everyone_at_once():
    p = CorridorParams(**{**QUIET, "breakdown_prob": 0.0})
    speeds, sched = gen_day(p, "weather", np.random.default_rng(4))
    a, b = sched.weather_window
    mid = int((a + b) / 2)
    np.testing.assert_allclose(speeds[:, mid], p.free_flow_speed - p.weather_drop)


@given(st.integers(0, 10_000), st.sampled_from(["normal", "event", "weather"]))
def test_speeds_bounded(seed, kind):
    p = CorridorParams(noise_sd=8.0)
    speeds, _ = gen_day(p, kind, np.random.default_rng(seed))
    assert speeds.shape == (p.n_sensors, STEPS_PER_DAY)
    assert speeds.min() >= 0 and speeds.max() <= p.free_flow_speed + 4 * p.noise_sd


def test_wave_lag_beats_zero_lag_correlation():
    p = CorridorParams(**{**QUIET, "queue_length": (6, 6)})
    f = gen_dataset(p, 20, seed=5)
    b, up = p.bottleneck - 1, p.bottleneck - 1 - 4
    delay = int(round(4 / p.wave_speed))
    x, y = f.speeds[b], f.speeds[up]
    zero = np.corrcoef(x, y)[0, 1]
    lagged = np.corrcoef(x[:-delay], y[delay:])[0, 1]
    assert lagged > zero


def test_congestion_window_is_bimodal():
    f = gen_dataset(CorridorParams(seed=1), 40, "normal=0.8,event=0.1,weather=0.1")
    b = CorridorParams().bottleneck - 1
    window = (np.arange(f.n_times) % STEPS_PER_DAY >= 7.5 * 12) & \
             (np.arange(f.n_times) % STEPS_PER_DAY < 8.5 * 12)
    v = f.speeds[b, window]
    hist, edges = np.histogram(v, bins=np.arange(0, 90, 5))
    centers = 0.5 * (edges[1:] + edges[:-1])
    low = centers[np.argmax(np.where(centers < 45, hist, -1))]
    high = centers[np.argmax(np.where(centers >= 45, hist, -1))]
    trough = hist[(centers > low) & (centers < high)].min()
    assert high - low > 20
    assert trough < 0.5 * min(hist[centers == low][0], hist[centers == high][0])


def test_dataset_basics():
    f = gen_dataset(CorridorParams(), 1)
    assert f.days.tolist() == [0] and f.n_times == STEPS_PER_DAY
    assert f.sensor_ids[0] == "S01" and f.n_sensors == 21


def test_event_mix_gives_evening_windows():
    p = CorridorParams()
    _, schedules = gen_dataset(p, 10, mix={"event": 1.0}, return_schedules=True)
    assert all(any(e.kind == "event" for e in s.episodes) for s in schedules)


def test_dataset_deterministic():
    p = CorridorParams(seed=9)
    assert gen_dataset(p, 3, "normal=0.5,weather=0.5").equals(gen_dataset(p, 3, "normal=0.5,weather=0.5"))
    assert not gen_dataset(p, 3).equals(gen_dataset(p, 3, seed=10))


@pytest.mark.parametrize("kwargs", [dict(congested_speed=80.0), dict(bottleneck=0),
                                    dict(bottleneck=22), dict(n_sensors=0)])
def test_params_validation(kwargs):
    with pytest.raises(ParameterError):
        CorridorParams(**kwargs)


def test_mix_validation():
    with pytest.raises(ParameterError):
        gen_dataset(CorridorParams(), 2, "normal=0.5,event=0.2")
    with pytest.raises(ParameterError):
        gen_dataset(CorridorParams(), 2, {"snow": 1.0})
