"""Tabular Q-learning over the 64 discrete light states.

The agent sees only the discretized light reading.  Actions are signed PWM
steps applied to the current duty and clamped to ``[0, 255]``; the reward is
+1 when the agent sits in its target state and -1 everywhere else.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

NUM_STATES = 64
PWM_MAX = 255
DEFAULT_ACTION_DELTAS = (-32, -8, 0, 8, 32)


@dataclass(frozen=True)
class AgentConfig:
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon_initial: float = 0.5
    epsilon_decay: float = 0.999
    epsilon_min: float = 0.01
    action_deltas: tuple[int, ...] = DEFAULT_ACTION_DELTAS
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "action_deltas", tuple(int(d) for d in self.action_deltas))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon_min <= self.epsilon_initial <= 1.0:
            raise ValueError(
                "need 0 <= epsilon_min <= epsilon_initial <= 1, got "
                f"{self.epsilon_min}, {self.epsilon_initial}"
            )
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError(f"epsilon_decay must be in (0, 1], got {self.epsilon_decay}")
        if not self.action_deltas:
            raise ValueError("action set must not be empty")

    @property
    def num_actions(self) -> int:
        return len(self.action_deltas)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["action_deltas"] = list(self.action_deltas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AgentConfig":
        return cls(**d)


@dataclass(frozen=True)
class TargetLevel:
    label: str
    target_state: int


@dataclass
class QTable:
    """Dense action-value table with per-entry visit counts."""

    action_deltas: tuple[int, ...]
    num_states: int = NUM_STATES
    values: np.ndarray = field(default=None)  # type: ignore[assignment]
    visit_counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.action_deltas = tuple(int(d) for d in self.action_deltas)
        shape = (self.num_states, len(self.action_deltas))
        if self.values is None:
            self.values = np.zeros(shape, dtype=np.float64)
        else:
            self.values = np.array(self.values, dtype=np.float64).reshape(shape)
        if self.visit_counts is None:
            self.visit_counts = np.zeros(shape, dtype=np.int64)
        else:
            self.visit_counts = np.array(self.visit_counts, dtype=np.int64).reshape(shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Q-table values must be finite")
        if np.any(self.visit_counts < 0):
            raise ValueError("visit counts must be nonnegative")

    @classmethod
    def zeros(cls, action_deltas: Sequence[int], num_states: int = NUM_STATES) -> "QTable":
        return cls(action_deltas=tuple(action_deltas), num_states=num_states)

    @property
    def num_actions(self) -> int:
        return len(self.action_deltas)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_states, self.num_actions)

    def copy(self) -> "QTable":
        return QTable(
            action_deltas=self.action_deltas,
            num_states=self.num_states,
            values=self.values.copy(),
            visit_counts=self.visit_counts.copy(),
        )

    def to_dict(self, config: AgentConfig | None = None) -> dict[str, Any]:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "action_deltas": list(self.action_deltas),
            "values": [float(v) for v in self.values.ravel()],
            "visit_counts": [int(v) for v in self.visit_counts.ravel()],
            "config": config.to_dict() if config is not None else None,
        }

    def to_json(self, config: AgentConfig | None = None) -> str:
        return json.dumps(self.to_dict(config), indent=1)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QTable":
        n_states, n_actions = int(d["num_states"]), int(d["num_actions"])
        deltas = tuple(d["action_deltas"])
        if len(deltas) != n_actions:
            raise ValueError("action_deltas length does not match num_actions")
        values = np.asarray(d["values"], dtype=np.float64)
        counts = np.asarray(d["visit_counts"], dtype=np.int64)
        if values.size != n_states * n_actions or counts.size != n_states * n_actions:
            raise ValueError(f"table payload does not match shape ({n_states}, {n_actions})")
        return cls(action_deltas=deltas, num_states=n_states, values=values, visit_counts=counts)

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        return cls.from_dict(json.loads(text))


def apply_action(pwm: int, delta: int) -> int:
    """Return ``pwm + delta`` clamped to the valid duty range."""
    return min(PWM_MAX, max(0, pwm + delta))


def q_update(table: QTable, s: int, a: int, r: float, s_next: int, cfg: AgentConfig) -> QTable:
    """One Bellman backup of entry ``(s, a)``; mutates and returns ``table``."""
    n_s, n_a = table.values.shape
    if not (0 <= s < n_s and 0 <= s_next < n_s):
        raise IndexError(f"state out of range [0, {n_s - 1}]: s={s}, s_next={s_next}")
    if not 0 <= a < n_a:
        raise IndexError(f"action out of range [0, {n_a - 1}]: a={a}")
    if not math.isfinite(r):
        raise ValueError(f"reward must be finite, got {r}")
    old = table.values[s, a]
    target = r + cfg.gamma * table.values[s_next].max()
    new = old + cfg.alpha * (target - old)
    if not math.isfinite(new):
        raise ValueError("update produced a non-finite value")
    table.values[s, a] = new
    table.visit_counts[s, a] += 1
    return table


def select_action(table: QTable, s: int, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties are broken uniformly at random."""
    row = table.values[s]
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(row.shape[0]))
    best = np.flatnonzero(row == row.max())
    if best.shape[0] == 1:
        return int(best[0])
    return int(best[rng.integers(best.shape[0])])


def decay_epsilon(epsilon: float, cfg: AgentConfig) -> float:
    return max(cfg.epsilon_min, epsilon * cfg.epsilon_decay)


def reward_for(s: int, target: TargetLevel) -> int:
    return 1 if s == target.target_state else -1


def greedy_policy(table: QTable) -> list[int]:
    """Per-state argmax, lowest index on ties."""
    # np.argmax already returns the first maximal index
    return [int(a) for a in np.argmax(table.values, axis=1)]


class QAgent:
    """Epsilon-greedy learner bundling a table, its config and a random source."""

    def __init__(
        self,
        cfg: AgentConfig,
        table: QTable | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.cfg = cfg
        self.table = table if table is not None else QTable.zeros(cfg.action_deltas)
        if self.table.action_deltas != cfg.action_deltas:
            raise ValueError("table action set does not match config")
        self.rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        self.epsilon = cfg.epsilon_initial

    def act(self, s: int) -> int:
        return select_action(self.table, s, self.epsilon, self.rng)

    def learn(self, s: int, a: int, r: float, s_next: int) -> None:
        q_update(self.table, s, a, r, s_next, self.cfg)
        self.epsilon = decay_epsilon(self.epsilon, self.cfg)
