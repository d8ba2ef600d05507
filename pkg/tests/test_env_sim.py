from __future__ import annotations

import json

import numpy as np
import pytest

from luxloop.env_sim import (
    ADC_MAX,
    DisturbanceEvent,
    EnvModel,
    Environment,
    Scenario,
    discretize,
    inject_disturbance,
    load_scenario,
    noiseless_raw,
    resolve_scenario,
    smooth_reading,
    spike_scenario,
    step_env,
    sunny_scenario,
    target_band,
)


def quiet(ambient=0.0, gain=800.0, **kw) -> EnvModel:
    return EnvModel(ambient_profile=Scenario(ambient), led_gain=gain, sensor_noise_sigma=0.0, **kw)


@pytest.mark.parametrize("ambient, pwm, expected", [(0, 0, 0), (0, 255, 800), (260, 0, 260)])
def test_step_examples(ambient, pwm, expected):
    env = Environment(quiet(ambient))
    assert step_env(env, pwm, 0).raw == expected


def test_adc_clamps():
    env = Environment(quiet(900, gain=1275))
    assert env.step(255, 0).raw == ADC_MAX


def test_step_requires_increasing_time():
    env = Environment(quiet())
    env.step(0, 3)
    with pytest.raises(ValueError):
        env.step(0, 3)


def test_response_lag():
    env = Environment(quiet(response_lag_steps=2, smoothing_alpha=1.0))
    raws = [env.step(255, t).raw for t in range(4)]
    assert raws == [0, 0, 800, 800]


def test_smoothing():
    assert smooth_reading(10.0, 42.0, 1.0) == 42.0
    assert smooth_reading(260.0, 650.0, 0.2) == pytest.approx(338.0)


def test_ema_bound_and_fixed_point():
    r, s0, a = 500.0, 20.0, 0.2
    s = s0
    for t in range(1, 200):
        s = smooth_reading(s, r, a)
        assert abs(s - r) <= (1 - a) ** t * abs(s0 - r) + 1e-9
    assert s == pytest.approx(r, abs=1e-9)


@pytest.mark.parametrize("x, state", [(0, 0), (1023, 63), (260, 16), (15.99, 0), (16, 1)])
def test_discretize(x, state):
    assert discretize(x) == state


@pytest.mark.parametrize("x", [-0.5, 1023.5, 5000])
def test_discretize_rejects(x):
    with pytest.raises(ValueError):
        discretize(x)


def test_discretize_surjective_and_monotone():
    states = [discretize(x) for x in range(ADC_MAX + 1)]
    assert sorted(set(states)) == list(range(64))
    assert states == sorted(states)


@pytest.mark.parametrize("label, state", [("L1", 3), ("L7", 33), ("L13", 63)])
def test_target_band(label, state):
    assert target_band(label).target_state == state


def test_target_band_monotone_and_errors():
    states = [target_band(f"L{i}").target_state for i in range(1, 14)]
    assert states == sorted(states) and 0 <= states[0] and states[-1] <= 63
    with pytest.raises(ValueError, match="L1, L2"):
        target_band("L14")


def test_every_target_reachable_with_default_gain():
    model = EnvModel()
    for i in range(1, 14):
        goal = target_band(f"L{i}").target_state
        assert any(discretize(noiseless_raw(model, d, 0)) == goal for d in range(0, 256, 8)), i


def test_spike_peak_and_shape():
    base = quiet(260, gain=1275)
    ev = DisturbanceEvent("spike", 10, 50, 390.0)
    m = inject_disturbance(base, ev)
    amb = [m.ambient_profile.ambient(t) for t in range(80)]
    assert max(amb) == pytest.approx(650.0)
    assert amb[9] == 260 and amb[60] == 260
    assert amb[59] == pytest.approx(260.0)
    env = Environment(m)
    peak = max(env.step(8, t).raw for t in range(80))
    assert peak > 650


def test_step_zero_and_clamp():
    base = Scenario(260.0)
    s0 = base.with_event(DisturbanceEvent("step", 0, 10, 0.0))
    assert [s0.ambient(t) for t in range(12)] == [260.0] * 12
    off = base.with_event(DisturbanceEvent("step", 2, 3, -260.0))
    assert [off.ambient(t) for t in range(6)] == [260, 260, 0, 0, 0, 260]
    deep = base.with_event(DisturbanceEvent("step", 0, 3, -400.0))
    assert deep.ambient(1) == 0.0


def test_flicker_alternates():
    s = Scenario(100.0, (DisturbanceEvent("flicker", 0, 4, 20.0),))
    assert [s.ambient(t) for t in range(5)] == [120, 80, 120, 80, 100]


def test_events_validate():
    with pytest.raises(ValueError):
        DisturbanceEvent("blink", 0, 3, 1.0)
    with pytest.raises(ValueError):
        DisturbanceEvent("step", 0, 0, 1.0)


def test_model_validation_and_round_trip():
    for kw in ({"led_gain": -1}, {"sensor_noise_sigma": -1}, {"smoothing_alpha": 0}, {"response_lag_steps": -1}):
        with pytest.raises(ValueError):
            EnvModel(**kw)
    m = EnvModel(ambient_profile=sunny_scenario(300), response_lag_steps=2)
    assert EnvModel.from_dict(json.loads(json.dumps(m.to_dict()))) == m


def test_scenario_files(tmp_path):
    sc = spike_scenario()
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc.to_dict()))
    assert load_scenario(p) == sc
    assert resolve_scenario(p) == sc
    assert resolve_scenario("sunny") == sunny_scenario()


def test_sunny_coverage():
    sc = sunny_scenario()
    band = target_band("L4").target_state
    covered = np.mean([discretize(min(ADC_MAX, sc.ambient(t))) >= band for t in range(2000)])
    assert covered == pytest.approx(0.6)


def test_seeded_noise_reproducible():
    m = EnvModel()

    def trace(seed):
        env = Environment(m, rng=np.random.default_rng(seed))
        return [env.step(64, t) for t in range(300)]

    assert trace(1) == trace(1)
    assert trace(1) != trace(2)
