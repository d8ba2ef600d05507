"""Ten seeded trials at every level, then the per-level spread of steps to converge.

Run: python3 demos/sweep_all_levels.py [out_dir]
"""

from __future__ import annotations

import sys

from luxloop import TrialConfig, run_sweep
from luxloop.harness import all_targets


def main(out_dir: str | None = None) -> None:
    summary = run_sweep(all_targets(), 10, TrialConfig(seed=0), out_dir=out_dir)
    print(f"{summary.converged_count}/{summary.runs} trials converged")
    print("level   median    q1      q3")
    for label, row in summary.per_target.items():
        s = row.steps
        print(f"{label:>5} {s.median:8.1f} {s.q1:7.1f} {s.q3:7.1f}")
    # levels in the middle of the range need more exploration than the ends
    print(f"overall median {summary.steps.median} steps")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
