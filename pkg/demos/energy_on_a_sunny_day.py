"""Energy drawn by three lamp controllers when daylight comes and goes.

Run: python3 demos/energy_on_a_sunny_day.py
"""

from __future__ import annotations

from luxloop import EnvModel, Scenario, target_band
from luxloop.energy import compare_controllers
from luxloop.env_sim import sunny_scenario
from luxloop.harness import train_agent


def main() -> None:
    target = target_band("L4")
    # train in a dim room with random disturbances, evaluate on the sunny profile
    agent = train_agent(EnvModel(ambient_profile=Scenario(260.0)), target, 50000, episode_steps=20, seed=0)
    report = compare_controllers(target, EnvModel(ambient_profile=sunny_scenario()), 2000, agent.table, p_max=6.0)
    print(report.table())


if __name__ == "__main__":
    main()
