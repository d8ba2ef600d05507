"""Trial and sweep orchestration.

A trial runs the sense / act / learn loop against one target level until the
agent has sat in the target state for ``convergence_hold`` consecutive steps
or the step cap is hit.  A sweep runs ``trials_per_target`` trials for every
requested target and aggregates box-plot statistics and histograms.

Each row of an :class:`EpisodeRecord` describes one control step *after* the
action was applied: the reading it produced, the resulting state, the action
and commanded duty, and the reward for landing in that state.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from luxloop.core_rl import PWM_MAX, AgentConfig, QAgent, QTable, TargetLevel, apply_action, reward_for
from luxloop.env_sim import (
    TARGET_LABELS,
    DisturbanceEvent,
    EnvModel,
    Environment,
    discretize,
    inject_disturbance,
    target_band,
)

CSV_HEADER = ("t", "raw", "smoothed", "state", "action", "pwm", "reward", "epsilon")
TIME_BIN_MS = 5.0
STEPS_BIN = 1000


@dataclass(frozen=True)
class TrialConfig:
    target: TargetLevel = field(default_factory=lambda: target_band("L1"))
    max_steps: int = 20000
    convergence_hold: int = 10
    env: EnvModel = field(default_factory=EnvModel)
    agent: AgentConfig = field(default_factory=AgentConfig)
    seed: int = 0
    initial_pwm: int = 0

    def __post_init__(self) -> None:
        if not self.max_steps >= self.convergence_hold >= 1:
            raise ValueError("need max_steps >= convergence_hold >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target.label,
            "target_state": self.target.target_state,
            "max_steps": self.max_steps,
            "convergence_hold": self.convergence_hold,
            "env": self.env.to_dict(),
            "agent": self.agent.to_dict(),
            "seed": self.seed,
            "initial_pwm": self.initial_pwm,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrialConfig":
        return cls(
            target=target_band(d["target"]),
            max_steps=int(d["max_steps"]),
            convergence_hold=int(d["convergence_hold"]),
            env=EnvModel.from_dict(d["env"]),
            agent=AgentConfig.from_dict(d["agent"]),
            seed=int(d["seed"]),
            initial_pwm=int(d.get("initial_pwm", 0)),
        )


@dataclass
class EpisodeRecord:
    target: str
    seed: int
    rows: list[tuple]
    converged: bool
    steps_to_converge: int | None
    wall_time_ms: float
    config: dict[str, Any] = field(default_factory=dict)
    qtable: QTable | None = field(default=None, repr=False, compare=False)

    @property
    def steps_taken(self) -> int:
        return len(self.rows)

    @property
    def states(self) -> list[int]:
        return [r[3] for r in self.rows]

    def column(self, name: str) -> list:
        i = CSV_HEADER.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def sidecar(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "seed": self.seed,
            "converged": self.converged,
            "steps": self.steps_to_converge,
            "steps_taken": self.steps_taken,
            "wall_time_ms": self.wall_time_ms,
            "config": self.config,
        }

    def save(self, directory: str | Path, stem: str) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        json_path = directory / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.sidecar(), indent=1))
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path: str | Path) -> "EpisodeRecord":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        return cls(
            target=meta["target"],
            seed=meta["seed"],
            rows=read_trajectory_csv(csv_path),
            converged=meta["converged"],
            steps_to_converge=meta["steps"],
            wall_time_ms=meta["wall_time_ms"],
            config=meta["config"],
        )


def read_trajectory_csv(path: str | Path) -> list[tuple]:
    """Parse an episode CSV; raises ``ValueError`` naming the first bad row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: bad header {header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(CSV_HEADER):
                    raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
                t, raw, smoothed, state, action, pwm, reward, eps = row
                rows.append(
                    (int(t), int(raw), float(smoothed), int(state), int(action), int(pwm), int(reward), float(eps))
                )
            except ValueError as exc:
                raise ValueError(f"{path}: bad row at line {lineno}: {exc}") from None
    return rows


def trial_seed(base_seed: int, target_index: int, trial: int) -> int:
    ss = np.random.SeedSequence([base_seed, target_index, trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def trial_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (agent, environment) random streams for one trial."""
    agent_ss, env_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(agent_ss), np.random.default_rng(env_ss)


def detect_convergence(trajectory: Sequence[int], target: TargetLevel, hold: int) -> int | None:
    """First 0-based index closing a run of ``hold`` consecutive target states."""
    if hold < 1:
        raise ValueError("hold must be >= 1")
    run = 0
    for i, s in enumerate(trajectory):
        run = run + 1 if s == target.target_state else 0
        if run >= hold:
            return i
    return None


class TrialRunner:
    """Step-at-a-time form of :func:`run_trial`.

    The target can be swapped between steps; the reward switches on the
    next step and the convergence counter starts over.
    """

    def __init__(self, cfg: TrialConfig, agent: QAgent | None = None, *, stop_on_converge: bool = True):
        agent_rng, env_rng = trial_rngs(cfg.seed)
        self.cfg = cfg
        self.agent = agent if agent is not None else QAgent(cfg.agent, rng=agent_rng)
        self.env = Environment(cfg.env, initial_pwm=cfg.initial_pwm, rng=env_rng)
        self.stop_on_converge = stop_on_converge
        self.target = cfg.target
        self.rows: list[tuple] = []
        self.state = self.env.state
        self.pwm = cfg.initial_pwm
        self.run = 0
        self.steps_to_converge: int | None = None

    @property
    def t(self) -> int:
        return len(self.rows)

    @property
    def converged(self) -> bool:
        return self.steps_to_converge is not None

    @property
    def done(self) -> bool:
        return self.t >= self.cfg.max_steps or (self.stop_on_converge and self.converged)

    def set_target(self, target: TargetLevel) -> None:
        if target != self.target:
            self.target = target
            self.run = 0
            self.steps_to_converge = None

    def step(self) -> tuple:
        agent = self.agent
        t = self.t
        eps = agent.epsilon
        a = agent.act(self.state)
        self.pwm = apply_action(self.pwm, agent.cfg.action_deltas[a])
        reading = self.env.step(self.pwm, t)
        s_next = discretize(reading.smoothed)
        r = reward_for(s_next, self.target)
        agent.learn(self.state, a, r, s_next)
        row = (t, reading.raw, reading.smoothed, s_next, a, self.pwm, r, eps)
        self.rows.append(row)
        self.state = s_next
        self.run = self.run + 1 if s_next == self.target.target_state else 0
        if self.run >= self.cfg.convergence_hold and self.steps_to_converge is None:
            self.steps_to_converge = t + 1
        return row

    def record(self, wall_time_ms: float) -> EpisodeRecord:
        return EpisodeRecord(
            target=self.target.label,
            seed=self.cfg.seed,
            rows=self.rows,
            converged=self.converged,
            steps_to_converge=self.steps_to_converge,
            wall_time_ms=wall_time_ms,
            config=self.cfg.to_dict(),
            qtable=self.agent.table,
        )


def run_trial(cfg: TrialConfig, agent: QAgent | None = None) -> EpisodeRecord:
    """Run one trial.  Pass ``agent`` to continue learning with an existing table."""
    runner = TrialRunner(cfg, agent)
    start = time.perf_counter_ns()
    while not runner.done:
        runner.step()
    return runner.record((time.perf_counter_ns() - start) / 1e6)


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    @classmethod
    def of(cls, values: Iterable[float]) -> "BoxStats":
        x = np.asarray(list(values), dtype=np.float64)
        if x.size == 0:
            raise ValueError("no values to summarize")
        q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
        return cls(float(x.min()), float(q1), float(med), float(q3), float(x.max()))

    def to_dict(self) -> dict[str, float]:
        return {"min": self.min, "q1": self.q1, "median": self.median, "q3": self.q3, "max": self.max}


def histogram(values: Sequence[float], width: float) -> list[tuple[float, float, int]]:
    """Fixed-width histogram starting at zero: ``(lo, hi, count)`` per bin."""
    top = max(values)
    n_bins = max(1, math.floor(top / width) + 1)
    counts = [0] * n_bins
    for v in values:
        counts[min(n_bins - 1, int(v // width))] += 1
    return [(i * width, (i + 1) * width, c) for i, c in enumerate(counts)]


@dataclass
class TargetSummary:
    runs: int
    converged_count: int
    steps: BoxStats
    time_ms: BoxStats


@dataclass
class SweepSummary:
    """Aggregate statistics of a sweep.

    Steps are "steps taken": ``steps_to_converge`` for converged trials and
    the full step cap for the rest.  Wall-clock statistics are kept apart
    from the step statistics because they are not reproducible run to run.
    """

    per_target: dict[str, TargetSummary]
    runs: int
    converged_count: int
    steps: BoxStats
    time_ms: BoxStats
    steps_histogram: list[tuple[float, float, int]]
    time_histogram: list[tuple[float, float, int]]
    records: list[EpisodeRecord] = field(default_factory=list, repr=False, compare=False)
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def convergence_rate(self) -> float:
        return self.converged_count / self.runs

    def to_dict(self) -> dict[str, Any]:
        return {
            "runs": self.runs,
            "converged_count": self.converged_count,
            "convergence_rate": self.convergence_rate,
            "steps": self.steps.to_dict(),
            "per_target": {
                label: {"runs": ts.runs, "converged_count": ts.converged_count, "steps": ts.steps.to_dict()}
                for label, ts in self.per_target.items()
            },
            "steps_histogram": [list(b) for b in self.steps_histogram],
            "failures": [list(f) for f in self.failures],
        }

    def timing_dict(self) -> dict[str, Any]:
        return {
            "time_ms": self.time_ms.to_dict(),
            "per_target": {label: ts.time_ms.to_dict() for label, ts in self.per_target.items()},
            "time_histogram": [list(b) for b in self.time_histogram],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def boxplot_csv(self, quantity: str = "steps") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "min", "q1", "median", "q3", "max", "converged_count"])
        for label, ts in self.per_target.items():
            b = getattr(ts, quantity)
            w.writerow([label, b.min, b.q1, b.median, b.q3, b.max, ts.converged_count])
        return buf.getvalue()

    @staticmethod
    def histogram_csv(bins: list[tuple[float, float, int]]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start", "bin_end", "count"])
        w.writerows(bins)
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "summary.json").write_text(self.to_json())
        (directory / "boxplot_steps.csv").write_text(self.boxplot_csv("steps"))
        (directory / "steps_histogram.csv").write_text(self.histogram_csv(self.steps_histogram))
        (directory / "timing.json").write_text(json.dumps(self.timing_dict(), indent=1))
        (directory / "boxplot_time.csv").write_text(self.boxplot_csv("time_ms"))
        (directory / "time_histogram.csv").write_text(self.histogram_csv(self.time_histogram))


def summarize(records: Sequence[EpisodeRecord]) -> SweepSummary:
    if not records:
        raise ValueError("cannot summarize an empty list of records")
    groups: dict[str, list[EpisodeRecord]] = {}
    for rec in records:
        groups.setdefault(rec.target, []).append(rec)
    ordered = sorted(groups, key=_label_order)
    per_target = {
        label: TargetSummary(
            runs=len(recs),
            converged_count=sum(r.converged for r in recs),
            steps=BoxStats.of(r.steps_taken for r in recs),
            time_ms=BoxStats.of(r.wall_time_ms for r in recs),
        )
        for label, recs in ((lbl, groups[lbl]) for lbl in ordered)
    }
    steps = [r.steps_taken for r in records]
    times = [r.wall_time_ms for r in records]
    return SweepSummary(
        per_target=per_target,
        runs=len(records),
        converged_count=sum(r.converged for r in records),
        steps=BoxStats.of(steps),
        time_ms=BoxStats.of(times),
        steps_histogram=histogram(steps, STEPS_BIN),
        time_histogram=histogram(times, TIME_BIN_MS),
        records=list(records),
    )


# -- sweeps ---------------------------------------------------------------------


def record_stem(label: str, trial: int) -> str:
    return f"{label}_trial{trial:02d}"


def _run_target(
    base: TrialConfig, target: TargetLevel, target_index: int, trials: int, carry: bool
) -> tuple[list[tuple[int, EpisodeRecord]], list[tuple[str, int, str]]]:
    records = []
    failures = []
    agent = None
    for trial in range(trials):
        cfg = replace(base, target=target, seed=trial_seed(base.seed, target_index, trial))
        if carry and agent is None:
            agent = QAgent(cfg.agent, rng=trial_rngs(cfg.seed)[0])
        try:
            records.append((trial, run_trial(cfg, agent=agent if carry else None)))
        except Exception as exc:  # noqa: BLE001 - reported per trial, sweep goes on
            failures.append((target.label, trial, f"{type(exc).__name__}: {exc}"))
    return records, failures


def run_sweep(
    targets: Sequence[TargetLevel],
    trials_per_target: int,
    base: TrialConfig,
    *,
    workers: int = 1,
    carry_qtable: bool = False,
    out_dir: str | Path | None = None,
) -> SweepSummary:
    """Run ``len(targets) * trials_per_target`` trials and summarize them.

    Seeds depend only on the base seed and the (target, trial) position, so
    results do not depend on ``workers``.
    """
    if trials_per_target < 1:
        raise ValueError("trials_per_target must be >= 1")
    jobs = [(base, tgt, target_index(tgt), trials_per_target, carry_qtable) for tgt in targets]
    if workers <= 1:
        grouped = [_run_target(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            grouped = list(pool.map(_run_target, *zip(*jobs)))
    records = [r for group, _ in grouped for _, r in group]
    failures = [f for _, fails in grouped for f in fails]
    if not records:
        raise RuntimeError(f"every trial failed: {failures}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        for group, _ in grouped:
            for trial, rec in group:
                rec.save(out_dir / "records", record_stem(rec.target, trial))
    summary = summarize(records)
    summary.failures = failures
    if out_dir is not None:
        summary.save(out_dir)
    return summary


def target_index(target: TargetLevel) -> int:
    return TARGET_LABELS.index(target.label) if target.label in TARGET_LABELS else target.target_state


def _label_order(label: str) -> tuple[int, str]:
    return (TARGET_LABELS.index(label) if label in TARGET_LABELS else len(TARGET_LABELS), label)


def load_records(directory: str | Path) -> list[EpisodeRecord]:
    return [EpisodeRecord.load(p) for p in sorted(Path(directory).glob("*.csv"))]


def all_targets() -> list[TargetLevel]:
    return [target_band(label) for label in TARGET_LABELS]


def train_agent(
    model: EnvModel,
    target: TargetLevel,
    n_steps: int,
    cfg: AgentConfig | None = None,
    *,
    episode_steps: int = 200,
    perturb: bool = True,
    seed: int = 0,
) -> QAgent:
    """Train one agent over many short episodes from random starting duties.

    With ``perturb`` set, about half of the episodes get a random spike or
    step disturbance so the agent also learns to back off under excess light.
    """
    cfg = cfg or AgentConfig()
    rng = np.random.default_rng(seed)
    agent = QAgent(cfg, rng=np.random.default_rng(rng.integers(2**63)))
    deltas = cfg.action_deltas
    done = 0
    while done < n_steps:
        ep_model = replace(model, rng_seed=int(rng.integers(2**63)))
        if perturb and rng.random() < 0.5:
            ep_model = inject_disturbance(ep_model, _random_event(rng, episode_steps))
        pwm = int(rng.integers(PWM_MAX // 8 + 1)) * 8
        env = Environment(ep_model, initial_pwm=pwm)
        s = env.state
        for t in range(min(episode_steps, n_steps - done)):
            a = agent.act(s)
            pwm = apply_action(pwm, deltas[a])
            s_next = discretize(env.step(pwm, t).smoothed)
            agent.learn(s, a, reward_for(s_next, target), s_next)
            s = s_next
        done += episode_steps
    return agent


def _random_event(rng: np.random.Generator, episode_steps: int) -> DisturbanceEvent:
    kind = "spike" if rng.random() < 0.5 else "step"
    duration = int(rng.integers(20, 61))
    start = int(rng.integers(0, max(1, episode_steps - duration)))
    magnitude = float(rng.uniform(-200.0, 450.0))
    return DisturbanceEvent(kind, start, duration, magnitude)
