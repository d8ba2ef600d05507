"""Compare a learned policy with the exact optimum of a noise-free desk.

With no noise, no lag and no smoothing the chamber is a finite
deterministic MDP, so value iteration gives the optimal policy.
Run: python3 demos/check_against_oracle.py
"""

from __future__ import annotations

from luxloop import EnvModel, target_band
from luxloop.oracle import build_desk_mdp, policy_agreement, train_on_desk, value_iteration


def main() -> None:
    model = EnvModel(sensor_noise_sigma=0.0, smoothing_alpha=1.0)
    for label in ("L1", "L7", "L13"):
        target = target_band(label)
        mdp = build_desk_mdp(model, target)
        vi = value_iteration(mdp)
        agent = train_on_desk(model, target)
        score = policy_agreement(agent.table, mdp, vi)
        print(f"{label}: value iteration settled in {vi.iterations} sweeps, agreement {score:.2f}")


if __name__ == "__main__":
    main()
