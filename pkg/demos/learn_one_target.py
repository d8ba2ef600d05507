"""Teach one agent to hold the desk at L7 and watch it settle.

Run: python3 demos/learn_one_target.py
"""

from __future__ import annotations

from luxloop import TrialConfig, run_trial, target_band
from luxloop.core_rl import greedy_policy


def main() -> None:
    target = target_band("L7")
    record = run_trial(TrialConfig(target=target, seed=7))
    print(f"target {target.label} is light state {target.target_state}")
    print(f"converged: {record.converged} after {record.steps_taken} steps")

    # the tail of the trajectory should sit on the target state
    tail = record.states[-10:]
    print("last ten states:", tail)

    # states the agent rarely visited still hold near-zero values, so their choice is arbitrary
    policy = greedy_policy(record.qtable)
    deltas = record.qtable.action_deltas
    for state in (0, target.target_state - 3, target.target_state, target.target_state + 3, 63):
        print(f"  state {state:2d} -> duty change {deltas[policy[state]]:+d}")


if __name__ == "__main__":
    main()
