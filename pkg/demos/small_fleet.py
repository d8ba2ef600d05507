"""A brain and three lamps on localhost sharing what they learn.

Each unit runs its own trial in a thread, streams telemetry and pushes its
table every few hundred steps; the brain averages tables per target group.
Run: python3 demos/small_fleet.py
"""

from __future__ import annotations

import threading

from luxloop import TrialConfig, target_band
from luxloop.fleet import Brain, BrainConfig, UnitConfig, unit_run


def main() -> None:
    brain = Brain(BrainConfig(default_target="L5", merge_every=300))
    address = brain.start()
    results = {}

    def lamp(unit: int) -> None:
        trial = TrialConfig(target=target_band("L1"), seed=100 + unit, max_steps=3000)
        cfg = UnitConfig(unit, trial, stop_on_converge=False, wait_for_target_s=2.0)
        results[unit] = unit_run(address, cfg)

    threads = [threading.Thread(target=lamp, args=(u,)) for u in (1, 2, 3)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    brain.wait_for_byes(3, timeout=5.0)
    brain.stop()

    for unit, res in sorted(results.items()):
        print(
            f"unit {unit}: target {res.record.target}, converged {res.record.converged}, "
            f"telemetry sent {res.telemetry_sent}, merges applied {res.merges_applied}"
        )
    print(f"brain saw {len(brain.snapshots)} snapshots and ran {len(brain.merges)} merges")


if __name__ == "__main__":
    main()
