"""Discrete-time LED/LDR chamber simulator.

The sensor reading is additive: ambient light plus LED contribution
(``led_gain * duty / 255``) plus gaussian noise, quantized to a 10-bit ADC.
The smoothed reading is an exponential moving average of the raw counts and
is what gets discretized into one of 64 light states (16 counts per state).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from luxloop.core_rl import NUM_STATES, PWM_MAX, TargetLevel

ADC_MAX = 1023
COUNTS_PER_STATE = (ADC_MAX + 1) // NUM_STATES
STEP_MS = 50.0

TARGET_LABELS = tuple(f"L{i}" for i in range(1, 14))
EVENT_KINDS = ("spike", "step", "flicker")

_NOISE_BLOCK = 4096


@dataclass(frozen=True)
class DisturbanceEvent:
    kind: str
    start_step: int
    duration_steps: int
    magnitude: float

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}; expected one of {EVENT_KINDS}")
        if self.duration_steps < 1:
            raise ValueError("duration_steps must be >= 1")

    @property
    def end_step(self) -> int:
        return self.start_step + self.duration_steps

    def offset(self, t: int) -> float:
        """Additive ambient contribution at step ``t``."""
        k = t - self.start_step
        if k < 0 or k >= self.duration_steps:
            return 0.0
        m = self.magnitude
        if self.kind == "step":
            return m
        if self.kind == "flicker":
            return m if k % 2 == 0 else -m
        # spike: linear rise over the first third, then exponential decay
        # that lands exactly on zero at the end of the window
        rise = max(1, self.duration_steps // 3)
        if k < rise:
            return m * (k + 1) / rise
        n = self.duration_steps - rise
        j = k - rise + 1
        lam = 4.0 / n
        tail = math.exp(-lam * n)
        return m * (math.exp(-lam * j) - tail) / (1.0 - tail)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "start_step": self.start_step,
            "duration_steps": self.duration_steps,
            "magnitude": self.magnitude,
        }


@dataclass(frozen=True)
class Scenario:
    """Ambient light profile: a constant baseline plus additive events."""

    baseline: float = 16.0
    events: tuple[DisturbanceEvent, ...] = ()

    def ambient(self, t: int) -> float:
        if not self.events:
            return max(0.0, self.baseline)
        return max(0.0, self.baseline + sum(e.offset(t) for e in self.events))

    def with_event(self, event: DisturbanceEvent) -> "Scenario":
        return replace(self, events=self.events + (event,))

    def to_dict(self) -> dict[str, Any]:
        return {"baseline": self.baseline, "events": [e.to_dict() for e in self.events]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        events = tuple(
            DisturbanceEvent(
                kind=e["kind"],
                start_step=int(e["start_step"]),
                duration_steps=int(e["duration_steps"]),
                magnitude=float(e["magnitude"]),
            )
            for e in d.get("events", [])
        )
        return cls(baseline=float(d.get("baseline", 16.0)), events=events)


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EnvModel:
    # 1275 = 5 counts per duty unit: an 8-unit PWM step moves the reading
    # 40 counts (2.5 states), so every target state has a reachable duty
    ambient_profile: Scenario = field(default_factory=Scenario)
    led_gain: float = 1275.0
    sensor_noise_sigma: float = 4.0
    smoothing_alpha: float = 0.5
    response_lag_steps: int = 0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.led_gain < 0:
            raise ValueError("led_gain must be >= 0")
        if self.sensor_noise_sigma < 0:
            raise ValueError("sensor_noise_sigma must be >= 0")
        if not 0.0 < self.smoothing_alpha <= 1.0:
            raise ValueError("smoothing_alpha must be in (0, 1]")
        if self.response_lag_steps < 0:
            raise ValueError("response_lag_steps must be >= 0")

    @property
    def deterministic(self) -> bool:
        return self.sensor_noise_sigma == 0 and self.response_lag_steps == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "ambient_profile": self.ambient_profile.to_dict(),
            "led_gain": self.led_gain,
            "sensor_noise_sigma": self.sensor_noise_sigma,
            "smoothing_alpha": self.smoothing_alpha,
            "response_lag_steps": self.response_lag_steps,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EnvModel":
        d = dict(d)
        d["ambient_profile"] = Scenario.from_dict(d.get("ambient_profile", {}))
        return cls(**d)


@dataclass(frozen=True, slots=True)
class AdcReading:
    raw: int
    smoothed: float


def noiseless_raw(model: EnvModel, duty: int, t: int) -> int:
    """Sensor reading for ``duty`` at step ``t`` with no noise and no lag."""
    x = model.ambient_profile.ambient(t) + model.led_gain * (duty / PWM_MAX)
    return int(min(ADC_MAX, max(0, round(x))))


def smooth_reading(previous_smoothed: float, raw: float, alpha: float) -> float:
    return previous_smoothed + alpha * (raw - previous_smoothed)


def discretize(smoothed: float) -> int:
    if not 0 <= smoothed <= ADC_MAX:
        raise ValueError(f"reading {smoothed} outside [0, {ADC_MAX}]")
    return min(NUM_STATES - 1, int(smoothed // COUNTS_PER_STATE))


def target_band(label: str) -> TargetLevel:
    if label not in TARGET_LABELS:
        raise ValueError(f"unknown target {label!r}; valid labels are {', '.join(TARGET_LABELS)}")
    i = int(label[1:])
    return TargetLevel(label=label, target_state=3 + 5 * (i - 1))


def inject_disturbance(model: EnvModel, event: DisturbanceEvent) -> EnvModel:
    return replace(model, ambient_profile=model.ambient_profile.with_event(event))


class Environment:
    """Stateful chamber: holds the lag line, EMA state and noise stream."""

    def __init__(self, model: EnvModel, initial_pwm: int = 0, rng: np.random.Generator | None = None):
        self.model = model
        self.rng = rng if rng is not None else np.random.default_rng(model.rng_seed)
        self._noise = np.empty(0)
        self._noise_pos = 0
        self._duty_line: deque[int] = deque(
            [initial_pwm] * (model.response_lag_steps + 1), maxlen=model.response_lag_steps + 1
        )
        self.smoothed = float(noiseless_raw(model, initial_pwm, 0))
        self._last_t: int | None = None

    @property
    def state(self) -> int:
        return discretize(self.smoothed)

    def _next_noise(self) -> float:
        if self._noise_pos >= self._noise.shape[0]:
            self._noise = self.rng.standard_normal(_NOISE_BLOCK)
            self._noise_pos = 0
        z = self._noise[self._noise_pos]
        self._noise_pos += 1
        return float(z)

    def step(self, pwm: int, t: int) -> AdcReading:
        if self._last_t is not None and t <= self._last_t:
            raise ValueError(f"step index must increase: got {t} after {self._last_t}")
        self._last_t = t
        m = self.model
        self._duty_line.append(pwm)
        duty = self._duty_line[0]
        x = m.ambient_profile.ambient(t) + m.led_gain * (duty / PWM_MAX)
        if m.sensor_noise_sigma > 0:
            x += m.sensor_noise_sigma * self._next_noise()
        raw = int(min(ADC_MAX, max(0, round(x))))
        self.smoothed = smooth_reading(self.smoothed, raw, m.smoothing_alpha)
        return AdcReading(raw, self.smoothed)


def step_env(env: Environment, pwm: int, t: int) -> AdcReading:
    return env.step(pwm, t)


def sunny_scenario(
    n_steps: int = 2000,
    baseline: float = 260.0,
    excess: float = 80.0,
    period: int = 100,
    sunny_steps: int = 60,
) -> Scenario:
    """Dim baseline with a bright block of ``sunny_steps`` at the start of every ``period``."""
    if not 0 < sunny_steps <= period:
        raise ValueError("need 0 < sunny_steps <= period")
    events = tuple(DisturbanceEvent("step", s, sunny_steps, excess) for s in range(0, n_steps, period))
    return Scenario(baseline, events)


def spike_scenario(
    baseline: float = 260.0,
    start_step: int = 300,
    duration_steps: int = 50,
    magnitude: float = 420.0,
) -> Scenario:
    """A single light spike on a dim baseline."""
    return Scenario(baseline, (DisturbanceEvent("spike", start_step, duration_steps, magnitude),))


SCENARIO_PRESETS = {
    "dark": lambda: Scenario(),
    "dim": lambda: Scenario(260.0),
    "sunny": sunny_scenario,
    "spike": spike_scenario,
}


def resolve_scenario(source: str | Path) -> Scenario:
    """Preset name or path to a scenario JSON file."""
    if str(source) in SCENARIO_PRESETS:
        return SCENARIO_PRESETS[str(source)]()
    return load_scenario(source)
