"""Model-based check on the learned policy.

The noise-free, lag-free, unfiltered chamber is a deterministic MDP once the state is
augmented with the current duty: the oracle state is ``(light, bucket)``
where ``bucket = duty // 8`` (32 levels).  Light successors use the settled
sensor reading for the new duty, i.e. the raw reading of a single
``Environment.step``.  Value iteration solves it exactly, and
:func:`policy_agreement` projects the oracle back onto the light-only states
the learning agent actually observes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from luxloop.core_rl import (
    NUM_STATES,
    PWM_MAX,
    AgentConfig,
    QAgent,
    QTable,
    TargetLevel,
    apply_action,
    greedy_policy,
    reward_for,
)
from luxloop.env_sim import EnvModel, discretize, noiseless_raw
from luxloop.harness import train_agent

DUTY_BUCKET = 8
NUM_BUCKETS = (PWM_MAX + 1) // DUTY_BUCKET


class ValueIterationError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"value iteration did not converge in {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class DeskMdp:
    model: EnvModel
    target: TargetLevel
    actions: tuple[int, ...]
    gamma: float
    next_state: np.ndarray  # (n_states, n_actions) successor index
    next_duty: np.ndarray  # (n_states, n_actions) exact duty after the action
    reward: np.ndarray  # (n_states, n_actions)
    start: int

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @staticmethod
    def index(light: int, bucket: int) -> int:
        return light * NUM_BUCKETS + bucket

    @staticmethod
    def light_of(x: int) -> int:
        return x // NUM_BUCKETS

    @staticmethod
    def bucket_of(x: int) -> int:
        return x % NUM_BUCKETS

    @staticmethod
    def duty_of(x: int) -> int:
        return (x % NUM_BUCKETS) * DUTY_BUCKET

    def reachable(self, start: int | None = None) -> set[int]:
        seen = {self.start if start is None else start}
        frontier = deque(seen)
        while frontier:
            x = frontier.popleft()
            for y in self.next_state[x]:
                y = int(y)
                if y not in seen:
                    seen.add(y)
                    frontier.append(y)
        return seen


def settled_light(model: EnvModel, duty: int) -> int:
    return discretize(noiseless_raw(model, duty, 0))


def build_desk_mdp(
    model: EnvModel,
    target: TargetLevel,
    actions: Sequence[int] | None = None,
    gamma: float = 0.9,
) -> DeskMdp:
    if model.sensor_noise_sigma != 0 or model.response_lag_steps != 0:
        raise ValueError("desk MDP needs a deterministic model (sensor_noise_sigma=0, response_lag_steps=0)")
    if model.smoothing_alpha != 1.0:
        raise ValueError("desk MDP needs smoothing_alpha=1 (the filter memory is not part of the oracle state)")
    if model.ambient_profile.events:
        raise ValueError("desk MDP needs a constant ambient profile (no disturbance events)")
    actions = tuple(AgentConfig().action_deltas if actions is None else actions)

    n = NUM_STATES * NUM_BUCKETS
    next_state = np.empty((n, len(actions)), dtype=np.int64)
    next_duty = np.empty((n, len(actions)), dtype=np.int64)
    reward = np.empty((n, len(actions)), dtype=np.float64)
    light_cache = {}
    for x in range(n):
        duty = DeskMdp.duty_of(x)
        for a, delta in enumerate(actions):
            d2 = apply_action(duty, delta)
            if d2 not in light_cache:
                light_cache[d2] = settled_light(model, d2)
            light = light_cache[d2]
            next_state[x, a] = DeskMdp.index(light, d2 // DUTY_BUCKET)
            next_duty[x, a] = d2
            reward[x, a] = reward_for(light, target)
    start = DeskMdp.index(settled_light(model, 0), 0)
    return DeskMdp(model, target, actions, gamma, next_state, next_duty, reward, start)


@dataclass
class ValueIterationResult:
    values: np.ndarray
    q_values: np.ndarray
    policy: np.ndarray
    residuals: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_states": int(self.values.shape[0]),
            "num_buckets": NUM_BUCKETS,
            "values": [float(v) for v in self.values],
            "policy": [int(a) for a in self.policy],
            "iterations": self.iterations,
            "final_residual": self.residuals[-1] if self.residuals else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _first_argmax(q: np.ndarray, tol: float) -> np.ndarray:
    return np.argmax(q >= q.max(axis=1, keepdims=True) - tol, axis=1)


def value_iteration(mdp: DeskMdp, tolerance: float = 1e-9, max_iters: int = 10000) -> ValueIterationResult:
    if not 0.0 <= mdp.gamma < 1.0:
        raise ValueError(f"value iteration needs 0 <= gamma < 1, got {mdp.gamma}")
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    v = np.zeros(mdp.num_states)
    residuals = []
    for _ in range(max_iters):
        q = mdp.reward + mdp.gamma * v[mdp.next_state]
        v_new = q.max(axis=1)
        resid = float(np.max(np.abs(v_new - v)))
        residuals.append(resid)
        v = v_new
        if resid < tolerance:
            break
    else:
        raise ValueIterationError(residuals[-1], max_iters)
    q = mdp.reward + mdp.gamma * v[mdp.next_state]
    return ValueIterationResult(values=v, q_values=q, policy=_first_argmax(q, 1e-12), residuals=residuals)


def _check_compatible(learned: QTable, mdp: DeskMdp) -> None:
    if learned.num_states != NUM_STATES or learned.action_deltas != mdp.actions:
        raise ValueError(
            f"learned table {learned.shape} with actions {learned.action_deltas} does not match "
            f"oracle ({NUM_STATES}, {len(mdp.actions)}) with actions {mdp.actions}"
        )


def policy_agreement(
    learned: QTable,
    mdp: DeskMdp,
    oracle: ValueIterationResult,
    reachable: Iterable[int] | None = None,
    tol: float = 1e-6,
) -> float:
    """Fraction of reachable oracle states where the learned action is value-equivalent.

    The learned action at augmented state ``(light, bucket)`` is the greedy
    action of ``learned`` at ``light``.  It agrees when the optimal value of
    its successor matches that of the oracle action's successor.
    """
    _check_compatible(learned, mdp)
    states = sorted(mdp.reachable() if reachable is None else reachable)
    if not states:
        raise ValueError("no states to compare")
    pol = greedy_policy(learned)
    v = oracle.values
    hits = 0
    for x in states:
        a_learned = pol[DeskMdp.light_of(x)]
        a_oracle = int(oracle.policy[x])
        if abs(v[mdp.next_state[x, a_learned]] - v[mdp.next_state[x, a_oracle]]) <= tol:
            hits += 1
    return hits / len(states)


def oracle_qtable(mdp: DeskMdp, oracle: ValueIterationResult) -> QTable:
    """Light-indexed table carrying the oracle Q-values of each reachable light state."""
    table = QTable.zeros(mdp.actions)
    for x in sorted(mdp.reachable()):
        light = DeskMdp.light_of(x)
        if settled_light(mdp.model, DeskMdp.duty_of(x)) == light:
            table.values[light] = oracle.q_values[x]
    return table


def train_on_desk(
    model: EnvModel,
    target: TargetLevel,
    n_steps: int = 50000,
    cfg: AgentConfig | None = None,
    episode_steps: int = 10,
    seed: int = 0,
) -> QAgent:
    """Q-learning on the deterministic chamber with short random-duty restarts.

    Short episodes keep the transient states visited after epsilon has
    decayed; long ones spend most steps parked on the target.
    """
    if not model.deterministic or model.ambient_profile.events or model.smoothing_alpha != 1.0:
        raise ValueError("train_on_desk needs a deterministic, unfiltered, constant-ambient model")
    return train_agent(model, target, n_steps, cfg, episode_steps=episode_steps, perturb=False, seed=seed)
