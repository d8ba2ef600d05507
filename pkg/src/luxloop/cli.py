"""``luxloop`` command line.

Every invocation writes into one run directory ``<root>/<run_id>`` where the
root is ``--out``, else ``$LUXLOOP_OUT``, else ``./runs``.  The directory
ends with a ``manifest.json`` listing the command, the effective config and
every file written.

Option values are resolved as built-in defaults, then the JSON file given
by ``--config``, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from luxloop.core_rl import NUM_STATES, AgentConfig, QAgent, QTable
from luxloop.energy import CONTROLLERS, DEFAULT_P_MAX, compare_controllers
from luxloop.env_sim import TARGET_LABELS, EnvModel, Scenario, resolve_scenario, target_band
from luxloop.harness import (
    CSV_HEADER,
    TrialConfig,
    read_trajectory_csv,
    record_stem,
    run_sweep,
    run_trial,
    target_index,
    train_agent,
    trial_rngs,
    trial_seed,
)
from luxloop.svg import line_chart

log = logging.getLogger("luxloop")

DEFAULTS: dict[str, dict[str, Any]] = {
    "common": {"seed": 0, "scenario": "dark", "noise": None, "smoothing": None, "lag": None, "svg": False},
    "train": {"target": "L1", "episodes": 1, "max_steps": 20000, "hold": 10, "carry_qtable": False, "qtable": None},
    "sweep": {
        "targets": ",".join(TARGET_LABELS),
        "trials": 10,
        "max_steps": 20000,
        "hold": 10,
        "carry_qtable": False,
        "workers": 1,
    },
    "compare": {
        "target": "L4",
        "scenario": "sunny",
        "qtable": None,
        "train_first": False,
        "train_steps": 50000,
        "controllers": ",".join(CONTROLLERS),
        "p_max": DEFAULT_P_MAX,
        "duration": 2000,
        "assert_order": False,
        "open_duty": 255,
        "band": 8.0,
        "step": 8,
    },
    "replay": {"telemetry": False},
    "fleet": {
        "listen": "127.0.0.1:7070",
        "connect": "127.0.0.1:7070",
        "target": "L1",
        "unit_targets": "",
        "merge_every": None,
        "expect_units": None,
        "duration": None,
        "unit_id": 1,
        "max_steps": 20000,
        "hold": 10,
        "telemetry_every": 10,
        "wait_target": 2.0,
        "run_to_cap": False,
    },
}

CONTROLLER_ALIASES = {"rl": "rl", "open": "open_loop", "open_loop": "open_loop", "closed": "closed_loop", "closed_loop": "closed_loop"}


class CliError(Exception):
    pass


# -- parsing --------------------------------------------------------------------


def _flag(p: argparse.ArgumentParser, *names: str, **kw: Any) -> None:
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="luxloop", description="Q-learning LED light control: simulate, train, compare.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.set_defaults(_subparsers=sub.choices)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file of option values (overridden by flags)")
        p.add_argument("--out", help="output root (default $LUXLOOP_OUT or ./runs)")
        p.add_argument("--run-id", help="name of the run directory (default: command, time and seed)")
        _flag(p, "--seed", type=int)
        _flag(p, "--scenario", help="preset (dark, dim, sunny, spike) or scenario / environment JSON")
        _flag(p, "--noise", type=float, help="sensor noise sigma in counts")
        _flag(p, "--smoothing", type=float, help="EMA coefficient of the sensor filter")
        _flag(p, "--lag", type=int, help="LED response lag in steps")
        _flag(p, "--svg", action="store_true", help="also write SVG line charts")

    p = sub.add_parser("train", help="run training trials against one target")
    common(p)
    _flag(p, "--target")
    _flag(p, "--episodes", type=int)
    _flag(p, "--max-steps", type=int)
    _flag(p, "--hold", type=int)
    _flag(p, "--carry-qtable", action="store_true", help="share one Q-table across episodes")
    _flag(p, "--qtable", help="initial Q-table JSON")

    p = sub.add_parser("sweep", help="trials across many targets with summary statistics")
    common(p)
    _flag(p, "--targets", help="comma-separated labels (default L1..L13)")
    _flag(p, "--trials", type=int)
    _flag(p, "--max-steps", type=int)
    _flag(p, "--hold", type=int)
    _flag(p, "--carry-qtable", action="store_true")
    _flag(p, "--workers", type=int)

    p = sub.add_parser("compare", help="energy comparison of rl, open-loop and closed-loop control")
    common(p)
    _flag(p, "--target")
    _flag(p, "--qtable", help="trained Q-table JSON")
    _flag(p, "--train-first", action="store_true", help="train a policy on the scenario baseline first")
    _flag(p, "--train-steps", type=int)
    _flag(p, "--controllers", help="comma-separated subset of rl, open, closed")
    _flag(p, "--p-max", type=float)
    _flag(p, "--duration", type=int, help="steps per controller run")
    _flag(p, "--assert-order", action="store_true", help="fail if rl consumes more than open loop")
    _flag(p, "--open-duty", type=int, help="constant duty of the open-loop controller")
    _flag(p, "--band", type=float, help="closed-loop dead band half-width in counts")
    _flag(p, "--step", type=int, help="closed-loop duty step")

    p = sub.add_parser("replay", help="plot-ready export of an episode CSV or fleet telemetry log")
    common(p)
    p.add_argument("record", help="episode CSV (or NDJSON log with --telemetry)")
    _flag(p, "--telemetry", action="store_true")

    p = sub.add_parser("fleet", help="launch a brain or a unit")
    common(p)
    p.add_argument("role", choices=("brain", "unit"))
    _flag(p, "--listen")
    _flag(p, "--connect")
    _flag(p, "--target", help="default target (brain) or local target (unit)")
    _flag(p, "--unit-targets", help="brain: per-unit labels, e.g. 1=L3,2=L5")
    _flag(p, "--merge-every", type=int, nargs="?", const=500)
    _flag(p, "--expect-units", type=int, help="brain: exit after this many units said BYE")
    _flag(p, "--duration", type=float, help="brain: seconds to serve")
    _flag(p, "--unit-id", type=int)
    _flag(p, "--max-steps", type=int)
    _flag(p, "--hold", type=int)
    _flag(p, "--telemetry-every", type=int)
    _flag(p, "--wait-target", type=float)
    _flag(p, "--run-to-cap", action="store_true", help="unit: keep running after convergence")
    return parser


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    opts = dict(DEFAULTS["common"])
    opts.update(DEFAULTS[args.command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        section = loaded.pop(args.command, {})
        for src in (loaded, section):
            for k, v in src.items():
                k = k.replace("-", "_")
                if k not in opts:
                    raise CliError(f"unknown config key {k!r} for {args.command}")
                opts[k] = v
    skip = {"command", "config", "out", "run_id", "verbose", "_subparsers"}
    opts.update({k: v for k, v in vars(args).items() if k not in skip})
    return opts


# -- helpers --------------------------------------------------------------------


class RunDir:
    def __init__(self, root: Path, run_id: str):
        self.run_id = run_id
        self.path = root / run_id
        self.path.mkdir(parents=True, exist_ok=False)
        self.outputs: list[str] = []

    def file(self, rel: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, rel: str, text: str) -> Path:
        p = self.file(rel)
        p.write_text(text)
        return p

    def manifest(self, argv: Sequence[str], opts: dict[str, Any], status: int) -> None:
        files = sorted(str(p.relative_to(self.path)) for p in self.path.rglob("*") if p.is_file())
        doc = {"run_id": self.run_id, "command": ["luxloop", *argv], "config": opts, "exit_status": status, "outputs": files}
        (self.path / "manifest.json").write_text(json.dumps(doc, indent=1, default=str))


def _open_run_dir(args: argparse.Namespace, seed: Any) -> RunDir:
    root = Path(args.out or os.environ.get("LUXLOOP_OUT") or "runs")
    if args.run_id:
        return RunDir(root, args.run_id)
    base = f"{args.command}-{time.strftime('%Y%m%dT%H%M%S')}-s{seed}"
    for k in range(1000):
        try:
            return RunDir(root, base if k == 0 else f"{base}-{k}")
        except FileExistsError:
            continue
    raise CliError(f"cannot create a run directory under {root}")


def _target(label: str):
    try:
        return target_band(label)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _env_model(opts: dict[str, Any]) -> EnvModel:
    source = opts["scenario"]
    try:
        if isinstance(source, dict):
            d = source
        elif Path(str(source)).suffix == ".json":
            d = json.loads(Path(source).read_text())
        else:
            d = None
        if d is None:
            model = EnvModel(ambient_profile=resolve_scenario(source))
        elif "ambient_profile" in d:
            model = EnvModel.from_dict(d)
        else:
            model = EnvModel(ambient_profile=Scenario.from_dict(d))
        overrides = {
            "sensor_noise_sigma": opts.get("noise"),
            "smoothing_alpha": opts.get("smoothing"),
            "response_lag_steps": opts.get("lag"),
        }
        return replace(model, **{k: v for k, v in overrides.items() if v is not None})
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad scenario {source!r}: {exc}") from None


def _positive(opts: dict[str, Any], *keys: str) -> None:
    for k in keys:
        if opts.get(k) is not None and opts[k] < 1:
            raise CliError(f"--{k.replace('_', '-')} must be >= 1, got {opts[k]}")


def _load_qtable(path: str, actions: Sequence[int]) -> QTable:
    try:
        table = QTable.from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot load Q-table {path}: {exc}") from None
    if table.num_states != NUM_STATES or table.action_deltas != tuple(actions):
        raise CliError(
            f"Q-table {path} has shape {table.shape} with actions {table.action_deltas}; "
            f"expected ({NUM_STATES}, {len(actions)}) with actions {tuple(actions)}"
        )
    return table


def _episode_svg(rows: list[tuple], title: str) -> str:
    t = [r[0] for r in rows]
    return line_chart(
        {
            "raw": (t, [r[1] for r in rows]),
            "smoothed": (t, [r[2] for r in rows]),
            "pwm": (t, [r[5] for r in rows]),
            "state": (t, [r[3] for r in rows]),
        },
        title=title,
    )


def _trial_config(opts: dict[str, Any], label: str) -> TrialConfig:
    _positive(opts, "max_steps", "hold")
    try:
        return TrialConfig(
            target=_target(label), max_steps=opts["max_steps"], convergence_hold=opts["hold"], env=_env_model(opts)
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


# -- commands -------------------------------------------------------------------


def cmd_train(opts: dict[str, Any], run: RunDir) -> int:
    _positive(opts, "episodes")
    base = _trial_config(opts, opts["target"])
    target = base.target
    idx = target_index(target)
    loaded = _load_qtable(opts["qtable"], base.agent.action_deltas) if opts["qtable"] is not None else None
    agent = None
    for ep in range(opts["episodes"]):
        cfg = replace(base, seed=trial_seed(opts["seed"], idx, ep))
        if agent is None or not opts["carry_qtable"]:
            table = loaded.copy() if loaded is not None else None
            agent = QAgent(cfg.agent, table=table, rng=trial_rngs(cfg.seed)[0])
        rec = run_trial(cfg, agent=agent)
        stem = record_stem(target.label, ep)
        rec.save(run.path / "records", stem)
        if opts["svg"]:
            run.write(f"records/{stem}.svg", _episode_svg(rec.rows, f"{target.label} episode {ep}"))
        run.write("qtable.json", rec.qtable.to_json(cfg.agent))
        steps = rec.steps_to_converge if rec.converged else rec.steps_taken
        print(f"{target.label} episode {ep}: converged={rec.converged} steps={steps} time_ms={rec.wall_time_ms:.1f}")
    return 0


def cmd_sweep(opts: dict[str, Any], run: RunDir) -> int:
    _positive(opts, "trials", "workers")
    labels = [s.strip() for s in str(opts["targets"]).split(",") if s.strip()]
    if not labels:
        raise CliError("--targets is empty")
    targets = [_target(lbl) for lbl in labels]
    base = replace(_trial_config(opts, labels[0]), seed=opts["seed"])
    summary = run_sweep(
        targets, opts["trials"], base, workers=opts["workers"], carry_qtable=opts["carry_qtable"], out_dir=run.path
    )
    for label, ts in summary.per_target.items():
        print(
            f"{label}: {ts.converged_count}/{ts.runs} converged, median steps {ts.steps.median:.0f}, "
            f"median time {ts.time_ms.median:.1f} ms"
        )
    print(
        f"total: {summary.converged_count}/{summary.runs} converged, median steps {summary.steps.median:.0f}, "
        f"median time {summary.time_ms.median:.1f} ms"
    )
    if opts["svg"]:
        xs = list(range(1, len(summary.per_target) + 1))
        stats = list(summary.per_target.values())
        run.write(
            "boxplot_steps.svg",
            line_chart(
                {
                    "q1": (xs, [s.steps.q1 for s in stats]),
                    "median": (xs, [s.steps.median for s in stats]),
                    "q3": (xs, [s.steps.q3 for s in stats]),
                },
                title="steps to converge by target (" + ", ".join(summary.per_target) + ")",
                stacked=False,
            ),
        )
    if summary.failures:
        for label, trial, msg in summary.failures:
            print(f"FAILED {label} trial {trial}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_compare(opts: dict[str, Any], run: RunDir) -> int:
    target = _target(opts["target"])
    model = _env_model(opts)
    _positive(opts, "duration", "train_steps")
    if opts["p_max"] <= 0:
        raise CliError("--p-max must be > 0")
    if not 0 <= opts["open_duty"] <= 255:
        raise CliError("--open-duty must be in [0, 255]")
    if opts["band"] < 0 or opts["step"] < 1:
        raise CliError("need --band >= 0 and --step >= 1")
    kinds = []
    for name in str(opts["controllers"]).split(","):
        name = name.strip()
        if name not in CONTROLLER_ALIASES:
            raise CliError(f"unknown controller {name!r}; choose from rl, open, closed")
        kinds.append(CONTROLLER_ALIASES[name])
    table = None
    if "rl" in kinds:
        actions = AgentConfig().action_deltas
        if opts["qtable"] is not None:
            table = _load_qtable(opts["qtable"], actions)
        elif opts["train_first"]:
            train_model = replace(model, ambient_profile=Scenario(model.ambient_profile.baseline))
            agent = train_agent(train_model, target, opts["train_steps"], episode_steps=20, seed=opts["seed"])
            table = agent.table
            run.write("qtable.json", table.to_json(agent.cfg))
        else:
            raise CliError("the rl controller needs --qtable or --train-first")
    report = compare_controllers(
        target,
        model,
        opts["duration"],
        table,
        p_max=opts["p_max"],
        controllers=kinds,
        open_duty=opts["open_duty"],
        band=opts["band"],
        step=opts["step"],
        seed=opts["seed"],
    )
    report.save(run.path)
    print(report.table())
    if opts["svg"]:
        t = list(range(opts["duration"]))
        run.write(
            "energy_pwm.svg",
            line_chart({k: (t, [r[0] for r in tr]) for k, tr in report.traces.items()}, title=f"duty by controller, {target.label}"),
        )
    if opts["assert_order"] and "rl" in report.entries and "open_loop" in report.entries:
        if report.entries["rl"].consumed_watts > report.entries["open_loop"].consumed_watts:
            print("ordering violated: rl consumed more than open loop", file=sys.stderr)
            return 1
    return 0


def cmd_replay(opts: dict[str, Any], run: RunDir) -> int:
    path = Path(opts["record"])
    if opts["telemetry"]:
        from luxloop.fleet import ProtocolError, TelemetrySnapshot, decode

        snaps = []
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CliError(str(exc)) from None
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                msg = decode(line)
                if msg.kind == "TELEMETRY":
                    snaps.append(TelemetrySnapshot.from_message(msg))
            except (ProtocolError, ValueError) as exc:
                raise CliError(f"{path}: bad message at line {lineno}: {exc}") from None
        if not snaps:
            raise CliError(f"{path}: no telemetry messages")
        with open(run.file("telemetry.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "t", "smoothed", "state", "pwm", "epsilon", "converged", "target"])
            for s in snaps:
                w.writerow([s.unit, s.t, s.smoothed, s.state, s.pwm, s.epsilon, int(s.converged), s.target])
        if opts["svg"]:
            units = sorted({s.unit for s in snaps})
            series = {
                f"unit {u} state": ([s.t for s in snaps if s.unit == u], [s.state for s in snaps if s.unit == u])
                for u in units
            }
            run.write("telemetry.svg", line_chart(series, title="fleet telemetry", stacked=False))
        print(f"{len(snaps)} telemetry snapshots from {len({s.unit for s in snaps})} units")
        return 0

    try:
        rows = read_trajectory_csv(path)
    except OSError as exc:
        raise CliError(str(exc)) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not rows:
        raise CliError(f"{path}: no data rows")
    cols = ("t", "raw", "smoothed", "pwm", "state")
    with open(run.file("replay.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[CSV_HEADER.index(c)] for c in cols])
    if opts["svg"]:
        run.write("replay.svg", _episode_svg(rows, path.stem))
    print(f"{len(rows)} steps, raw max {max(r[1] for r in rows)}, final state {rows[-1][3]}")
    return 0


def _unit_targets(text: str) -> dict[int, str]:
    out = {}
    for part in filter(None, (s.strip() for s in text.split(","))):
        unit, sep, label = part.partition("=")
        if not sep:
            raise CliError(f"bad --unit-targets entry {part!r}; expected unit=label")
        try:
            out[int(unit)] = _target(label).label
        except ValueError:
            raise CliError(f"bad unit id in {part!r}") from None
    return out


def cmd_fleet(opts: dict[str, Any], run: RunDir) -> int:
    from luxloop.fleet import BrainConfig, UnitConfig, brain_serve, parse_address, unit_run

    if opts["role"] == "brain":
        try:
            addr = parse_address(opts["listen"])
            cfg = BrainConfig(
                default_target=_target(opts["target"]).label,
                targets=_unit_targets(opts["unit_targets"]),
                merge_every=opts["merge_every"],
                log_path=run.file("telemetry.ndjson"),
            )
        except ValueError as exc:
            raise CliError(str(exc)) from None
        try:
            brain = brain_serve(f"{addr[0]}:{addr[1]}", cfg, expect_units=opts["expect_units"], duration_s=opts["duration"])
        except OSError as exc:
            print(f"luxloop: cannot listen on {opts['listen']}: {exc}", file=sys.stderr)
            return 1
        stats = {
            "snapshots": len(brain.snapshots),
            "units": sorted(set(brain.hellos)),
            "merges": brain.merges,
            "seq_regressions": brain.seq.regressions,
            "malformed": brain.malformed,
        }
        run.write("brain.json", json.dumps(stats, indent=1))
        print(f"brain: {stats['snapshots']} snapshots from {len(stats['units'])} units, {len(brain.merges)} merges")
        return 0

    try:
        addr = parse_address(opts["connect"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _positive(opts, "telemetry_every")
    trial = _trial_config(opts, opts["target"])
    trial = replace(trial, seed=trial_seed(opts["seed"], target_index(trial.target), 0))
    try:
        ucfg = UnitConfig(
            unit_id=opts["unit_id"],
            trial=trial,
            telemetry_every=opts["telemetry_every"],
            stop_on_converge=not opts["run_to_cap"],
            wait_for_target_s=opts["wait_target"],
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    res = unit_run(addr, ucfg)
    if not res.connected:
        print(f"warning: brain at {opts['connect']} unreachable; ran standalone", file=sys.stderr)
    stem = f"unit{ucfg.unit_id}"
    res.record.save(run.path, stem)
    run.write(f"{stem}_qtable.json", res.record.qtable.to_json(trial.agent))
    print(
        f"unit {ucfg.unit_id}: target {res.record.target} converged={res.record.converged} "
        f"steps={res.record.steps_taken} telemetry sent {res.telemetry_sent}/{res.telemetry_emitted} "
        f"dropped {res.dropped} merges {res.merges_applied}"
    )
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "compare": cmd_compare, "replay": cmd_replay, "fleet": cmd_fleet}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sub = args._subparsers[args.command]
    try:
        opts = resolve_options(args)
        if "target" in opts:
            _target(opts["target"])
        run = _open_run_dir(args, opts.get("seed"))
    except CliError as exc:
        sub.print_usage(sys.stderr)
        print(f"luxloop {args.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        status = COMMANDS[args.command](opts, run)
    except CliError as exc:
        sub.print_usage(sys.stderr)
        print(f"luxloop {args.command}: error: {exc}", file=sys.stderr)
        status = 2
    run.manifest(argv, opts, status)
    return status


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
