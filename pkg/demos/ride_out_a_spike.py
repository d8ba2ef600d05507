"""A short burst of bright light: the trained policy dims, then finds its way back.

Run: python3 demos/ride_out_a_spike.py
"""

from __future__ import annotations

from luxloop import EnvModel, Scenario, target_band
from luxloop.core_rl import greedy_policy
from luxloop.energy import run_controller
from luxloop.env_sim import spike_scenario
from luxloop.harness import train_agent


def main() -> None:
    target = target_band("L4")
    agent = train_agent(EnvModel(ambient_profile=Scenario(260.0)), target, 50000, episode_steps=20, seed=0)
    scenario = spike_scenario()
    (event,) = scenario.events
    trace = run_controller(
        "rl",
        EnvModel(ambient_profile=scenario),
        target,
        event.end_step + 100,
        policy=greedy_policy(agent.table),
        action_deltas=agent.table.action_deltas,
    )
    print("  t   pwm  raw  state")
    for t in range(event.start_step - 5, event.end_step + 20, 5):
        pwm, raw, _, state = trace[t]
        mark = "*" if event.start_step <= t < event.end_step else " "
        print(f"{mark}{t:4d} {pwm:4d} {raw:4d} {state:5d}")


if __name__ == "__main__":
    main()
