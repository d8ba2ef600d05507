"""Reference controllers and LED power accounting.

Power is proportional to duty: a trace draws ``p_max * mean(duty / 255)``
watts on average.  Savings are measured against the full-brightness
open-loop reference, so an open-loop controller at duty 255 saves nothing.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from luxloop.core_rl import PWM_MAX, QTable, TargetLevel, apply_action, greedy_policy
from luxloop.env_sim import COUNTS_PER_STATE, EnvModel, Environment, discretize

CONTROLLERS = ("rl", "open_loop", "closed_loop")
DEFAULT_P_MAX = 6.0


def open_loop_controller(t: int, duty: int = PWM_MAX) -> int:
    return duty


def target_center(target: TargetLevel) -> float:
    return COUNTS_PER_STATE * target.target_state + COUNTS_PER_STATE / 2


def closed_loop_controller(
    smoothed: float,
    target: TargetLevel,
    band: float = 8.0,
    step: int = 8,
    current: int = 0,
) -> int:
    """Nudge duty by ``step`` toward the target bin midpoint, hold inside the band."""
    if band < 0 or step < 1:
        raise ValueError("need band >= 0 and step >= 1")
    center = target_center(target)
    if smoothed < center - band:
        return apply_action(current, step)
    if smoothed > center + band:
        return apply_action(current, -step)
    return current


@dataclass(frozen=True)
class EnergyEntry:
    consumed_watts: float
    saved_watts: float
    duration_steps: int
    mean_abs_state_error: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "consumed_watts": self.consumed_watts,
            "saved_watts": self.saved_watts,
            "duration_steps": self.duration_steps,
            "mean_abs_state_error": self.mean_abs_state_error,
        }


def energy_account(pwm_trace: Sequence[int], p_max: float = DEFAULT_P_MAX) -> EnergyEntry:
    if p_max <= 0:
        raise ValueError("p_max must be > 0")
    if len(pwm_trace) == 0:
        raise ValueError("cannot account an empty PWM trace")
    consumed = p_max * (float(np.mean(np.asarray(pwm_trace, dtype=np.float64))) / PWM_MAX)
    return EnergyEntry(consumed_watts=consumed, saved_watts=p_max - consumed, duration_steps=len(pwm_trace))


@dataclass
class EnergyReport:
    p_max: float
    target: str
    entries: dict[str, EnergyEntry] = field(default_factory=dict)
    traces: dict[str, list[tuple[int, int, float, int]]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_max": self.p_max,
            "target": self.target,
            "controllers": {k: e.to_dict() for k, e in self.entries.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "consumed_watts", "saved_watts", "mean_abs_state_error"])
        for name, e in self.entries.items():
            w.writerow([name, e.consumed_watts, e.saved_watts, e.mean_abs_state_error])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'controller':<12} {'consumed W':>11} {'saved W':>9} {'|state err|':>12}"]
        for name, e in self.entries.items():
            lines.append(
                f"{name:<12} {e.consumed_watts:>11.3f} {e.saved_watts:>9.3f} {e.mean_abs_state_error:>12.3f}"
            )
        return "\n".join(lines)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "energy.json").write_text(self.to_json())
        (directory / "energy.csv").write_text(self.to_csv())


def run_controller(
    kind: str,
    model: EnvModel,
    target: TargetLevel,
    duration_steps: int,
    *,
    policy: Sequence[int] | None = None,
    action_deltas: Sequence[int] = (),
    open_duty: int = PWM_MAX,
    band: float = 8.0,
    step: int = 8,
    initial_pwm: int = 0,
    seed: int = 0,
) -> list[tuple[int, int, float, int]]:
    """Drive the chamber with one controller; returns ``(pwm, raw, smoothed, state)`` per step."""
    if kind not in CONTROLLERS:
        raise ValueError(f"unknown controller {kind!r}; expected one of {CONTROLLERS}")
    if kind == "rl" and policy is None:
        raise ValueError("the rl controller needs a policy")
    env = Environment(model, initial_pwm=initial_pwm, rng=np.random.default_rng(seed))
    pwm = initial_pwm
    smoothed = env.smoothed
    trace = []
    for t in range(duration_steps):
        if kind == "rl":
            pwm = apply_action(pwm, action_deltas[policy[discretize(smoothed)]])
        elif kind == "open_loop":
            pwm = open_loop_controller(t, open_duty)
        else:
            pwm = closed_loop_controller(smoothed, target, band, step, pwm)
        reading = env.step(pwm, t)
        smoothed = reading.smoothed
        trace.append((pwm, reading.raw, smoothed, discretize(smoothed)))
    return trace


def compare_controllers(
    target: TargetLevel,
    model: EnvModel,
    duration_steps: int,
    trained_policy: QTable | None,
    *,
    p_max: float = DEFAULT_P_MAX,
    controllers: Sequence[str] = CONTROLLERS,
    open_duty: int = PWM_MAX,
    band: float = 8.0,
    step: int = 8,
    initial_pwm: int = 0,
    seed: int = 0,
) -> EnergyReport:
    """Run each controller on the same scenario and noise seed and account its power."""
    report = EnergyReport(p_max=p_max, target=target.label)
    policy = greedy_policy(trained_policy) if trained_policy is not None else None
    deltas = trained_policy.action_deltas if trained_policy is not None else ()
    for kind in controllers:
        trace = run_controller(
            kind,
            model,
            target,
            duration_steps,
            policy=policy,
            action_deltas=deltas,
            open_duty=open_duty,
            band=band,
            step=step,
            initial_pwm=initial_pwm,
            seed=seed,
        )
        entry = energy_account([row[0] for row in trace], p_max)
        err = float(np.mean([abs(row[3] - target.target_state) for row in trace]))
        report.entries[kind] = EnergyEntry(entry.consumed_watts, entry.saved_watts, entry.duration_steps, err)
        report.traces[kind] = trace
    return report
