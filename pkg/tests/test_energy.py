from __future__ import annotations

import json

import numpy as np
import pytest

from luxloop.core_rl import QTable
from luxloop.energy import (
    closed_loop_controller,
    compare_controllers,
    energy_account,
    open_loop_controller,
    run_controller,
    target_center,
)
from luxloop.env_sim import EnvModel, Scenario, sunny_scenario, target_band
from luxloop.harness import train_agent

L4 = target_band("L4")


def test_open_loop_constant():
    assert {open_loop_controller(t) for t in range(100)} == {255}
    assert open_loop_controller(7, 128) == 128


@pytest.mark.parametrize(
    "trace, consumed", [([255] * 50, 6.0), ([0] * 50, 0.0), ([0, 255] * 25, 3.0)]
)
def test_energy_account_examples(trace, consumed):
    e = energy_account(trace, 6.0)
    assert e.consumed_watts == pytest.approx(consumed, abs=1e-12)
    assert e.saved_watts == pytest.approx(6.0 - consumed, abs=1e-12)
    assert e.consumed_watts + e.saved_watts == 6.0


def test_energy_account_errors():
    with pytest.raises(ValueError):
        energy_account([], 6.0)
    with pytest.raises(ValueError):
        energy_account([1], 0.0)


def test_closed_loop_examples():
    t13 = target_band("L13")
    assert closed_loop_controller(target_center(L4), L4, current=40) == 40
    assert closed_loop_controller(0, t13, current=0) == 8
    assert closed_loop_controller(1023, target_band("L1"), current=255) == 247
    assert target_center(L4) == 16 * 18 + 8
    with pytest.raises(ValueError):
        closed_loop_controller(0, L4, band=-1)


def test_closed_loop_rate_limited():
    trace = run_controller("closed_loop", EnvModel(ambient_profile=sunny_scenario()), L4, 2000)
    duty = np.array([0] + [r[0] for r in trace])
    assert np.max(np.abs(np.diff(duty))) <= 8


def test_zero_gain_makes_controllers_equivalent():
    m = EnvModel(ambient_profile=Scenario(300.0), led_gain=0.0)
    rng = np.random.default_rng(0)
    table = QTable((-32, -8, 0, 8, 32), values=rng.normal(size=(64, 5)))
    rep = compare_controllers(L4, m, 500, table)
    errs = {e.mean_abs_state_error for e in rep.entries.values()}
    assert len(errs) == 1


def test_shared_noise_across_controllers():
    m = EnvModel(ambient_profile=Scenario(300.0), led_gain=0.0)
    rep = compare_controllers(L4, m, 300, None, controllers=("open_loop", "closed_loop"))
    raws = [[r[1] for r in tr] for tr in rep.traces.values()]
    assert raws[0] == raws[1]


def test_report_persistence(tmp_path):
    rep = compare_controllers(L4, EnvModel(ambient_profile=sunny_scenario()), 400, None, controllers=("open_loop", "closed_loop"))
    rep.save(tmp_path)
    lines = (tmp_path / "energy.csv").read_text().splitlines()
    assert lines[0] == "controller,consumed_watts,saved_watts,mean_abs_state_error"
    assert lines[1].startswith("open_loop,6.0,0.0,")
    d = json.loads((tmp_path / "energy.json").read_text())
    assert d["controllers"]["open_loop"]["consumed_watts"] == 6.0
    for e in rep.entries.values():
        assert e.consumed_watts + e.saved_watts == pytest.approx(6.0, abs=1e-12)
    assert "open_loop" in rep.table()


def test_rl_needs_policy():
    with pytest.raises(ValueError):
        run_controller("rl", EnvModel(), L4, 10)
    with pytest.raises(ValueError):
        run_controller("fuzzy", EnvModel(), L4, 10)


def test_rl_under_open_loop_on_sunny_day():
    agent = train_agent(EnvModel(ambient_profile=Scenario(260.0)), L4, 20000, episode_steps=20, seed=1)
    rep = compare_controllers(L4, EnvModel(ambient_profile=sunny_scenario()), 2000, agent.table)
    assert rep.entries["rl"].consumed_watts <= rep.entries["open_loop"].consumed_watts
