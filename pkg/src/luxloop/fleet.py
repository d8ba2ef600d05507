"""Brain / unit coordination over newline-delimited JSON.

Every frame is one UTF-8 JSON object per line::

    {"kind": "TELEMETRY", "unit": 3, "seq": 17, "payload": {...}}

``unit`` names the unit a message is from (or, for brain replies, the unit
it is addressed to).  ``seq`` is a per-sender counter that must strictly
increase; the brain drops and counts regressions.

A unit runs the ordinary trial loop locally and treats the network as
best-effort: telemetry goes into a bounded buffer drained by a background
sender, so a slow or absent brain never stalls control.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from luxloop.core_rl import NUM_STATES, PWM_MAX, QAgent, QTable
from luxloop.env_sim import ADC_MAX, target_band
from luxloop.harness import EpisodeRecord, TrialConfig, TrialRunner

log = logging.getLogger(__name__)

KINDS = ("HELLO", "SET_TARGET", "TELEMETRY", "QSYNC_PUSH", "QSYNC_MERGED", "BYE")
UNIT_ID_MAX = 2**32 - 1
DEFAULT_MERGE_EVERY = 500


class ProtocolError(ValueError):
    pass


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must look like host:port, got {addr!r}")
    try:
        p = int(port)
    except ValueError:
        raise ValueError(f"bad port in {addr!r}") from None
    if not 0 <= p <= 65535:
        raise ValueError(f"port out of range in {addr!r}")
    return host, p


# -- messages -------------------------------------------------------------------


@dataclass(frozen=True)
class FleetMessage:
    kind: str
    unit: int
    seq: int
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if isinstance(self.unit, bool) or not isinstance(self.unit, int) or not 0 <= self.unit <= UNIT_ID_MAX:
            raise ProtocolError(f"unit id must be a 32-bit unsigned integer, got {self.unit!r}")
        if isinstance(self.seq, bool) or not isinstance(self.seq, int) or self.seq < 0:
            raise ProtocolError(f"seq must be a nonnegative integer, got {self.seq!r}")
        if not isinstance(self.payload, dict):
            raise ProtocolError("payload must be a JSON object")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "unit": self.unit, "seq": self.seq, "payload": self.payload}


def encode(msg: FleetMessage) -> bytes:
    line = json.dumps(msg.to_dict(), separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return line.encode("utf-8") + b"\n"


def decode(line: bytes | str) -> FleetMessage:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"frame is not UTF-8: {exc}") from None
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"frame is not JSON: {exc}") from None
    if not isinstance(d, dict) or set(d) != {"kind", "unit", "seq", "payload"}:
        raise ProtocolError("frame must be an object with exactly kind, unit, seq, payload")
    return FleetMessage(d["kind"], d["unit"], d["seq"], d["payload"])


@dataclass(frozen=True)
class TelemetrySnapshot:
    unit: int
    t: int
    smoothed: float
    state: int
    pwm: int
    epsilon: float
    converged: bool
    target: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.unit <= UNIT_ID_MAX:
            raise ValueError(f"unit out of range: {self.unit}")
        if self.t < 0:
            raise ValueError(f"t must be >= 0, got {self.t}")
        if not 0.0 <= self.smoothed <= ADC_MAX:
            raise ValueError(f"smoothed out of range: {self.smoothed}")
        if not 0 <= self.state < NUM_STATES:
            raise ValueError(f"state out of range: {self.state}")
        if not 0 <= self.pwm <= PWM_MAX:
            raise ValueError(f"pwm out of range: {self.pwm}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon out of range: {self.epsilon}")

    def to_payload(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "smoothed": self.smoothed,
            "state": self.state,
            "pwm": self.pwm,
            "epsilon": self.epsilon,
            "converged": self.converged,
            "target": self.target,
        }

    @classmethod
    def from_message(cls, msg: FleetMessage) -> "TelemetrySnapshot":
        p = msg.payload
        try:
            return cls(
                unit=msg.unit,
                t=int(p["t"]),
                smoothed=float(p["smoothed"]),
                state=int(p["state"]),
                pwm=int(p["pwm"]),
                epsilon=float(p["epsilon"]),
                converged=bool(p["converged"]),
                target=str(p.get("target", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad telemetry payload: {exc}") from None


class SeqTracker:
    """Per-sender last-seen sequence numbers."""

    def __init__(self) -> None:
        self.last: dict[int, int] = {}
        self.regressions = 0

    def accept(self, sender: int, seq: int) -> bool:
        prev = self.last.get(sender)
        if prev is not None and seq <= prev:
            self.regressions += 1
            return False
        self.last[sender] = seq
        return True


def merge_qtables(tables: Sequence[QTable]) -> QTable:
    """Element-wise mean of values; visit counts are summed."""
    if not tables:
        raise ValueError("need at least one table to merge")
    first = tables[0]
    for tb in tables[1:]:
        if tb.shape != first.shape or tb.action_deltas != first.action_deltas:
            raise ValueError(
                f"cannot merge table {tb.shape} {tb.action_deltas} with {first.shape} {first.action_deltas}"
            )
    if len(tables) == 1:
        return first.copy()
    # sorting makes the result independent of input order, and averaging
    # offsets from the minimum returns identical inputs bit-for-bit
    stacked = np.sort(np.stack([tb.values for tb in tables]), axis=0)
    lo = stacked[0]
    values = lo + np.mean(stacked - lo, axis=0)
    counts = np.sum(np.stack([tb.visit_counts for tb in tables]), axis=0)
    return QTable(first.action_deltas, first.num_states, values, counts)


def read_log(path: str | Path) -> list[FleetMessage]:
    with open(path, encoding="utf-8") as fh:
        return [decode(line) for line in fh if line.strip()]


# -- brain ----------------------------------------------------------------------


@dataclass
class BrainConfig:
    default_target: str = "L1"
    targets: dict[int, str] = field(default_factory=dict)
    merge_every: int | None = None
    log_path: str | Path | None = None

    def __post_init__(self) -> None:
        target_band(self.default_target)
        for label in self.targets.values():
            target_band(label)
        if self.merge_every is not None and self.merge_every < 1:
            raise ValueError("merge_every must be >= 1")

    def target_for(self, unit: int) -> str:
        return self.targets.get(unit, self.default_target)


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.unit: int | None = None

    def send(self, data: bytes) -> None:
        with self.lock:
            self.sock.sendall(data)


class Brain:
    """Threaded NDJSON server.

    Connection handlers only parse frames and enqueue them; a single
    aggregator thread owns the telemetry store, the sequence tracker and
    the merge state.
    """

    def __init__(self, config: BrainConfig | None = None):
        self.config = config or BrainConfig()
        self.snapshots: list[TelemetrySnapshot] = []
        self.seq = SeqTracker()
        self.malformed = 0
        self.merges: list[dict[str, Any]] = []
        self.hellos: list[int] = []
        self.byes: list[int] = []
        self.address: tuple[str, int] | None = None
        self._inbox: queue.Queue = queue.Queue()
        self._conns: dict[int, _Conn] = {}
        self._targets: dict[int, str] = {}
        self._pending: dict[int, QTable] = {}
        self._out_seq = 0
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._server: socket.socket | None = None
        self._log = None
        self._state_lock = threading.Lock()
        self._bye_event = threading.Condition()

    # lifecycle

    def start(self, address: str | tuple[str, int] = ("127.0.0.1", 0)) -> tuple[str, int]:
        host, port = parse_address(address) if isinstance(address, str) else address
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError:
            srv.close()
            raise
        srv.listen()
        srv.settimeout(0.2)
        self._server = srv
        self.address = srv.getsockname()[:2]
        if self.config.log_path is not None:
            self._log = open(self.config.log_path, "a", encoding="utf-8")
        for fn in (self._accept_loop, self._aggregate_loop):
            th = threading.Thread(target=fn, daemon=True)
            th.start()
            self._threads.append(th)
        log.info("brain listening on %s:%d", *self.address)
        return self.address

    def stop(self) -> None:
        self._stop.set()
        self._inbox.put(None)
        for th in self._threads:
            th.join(timeout=5)
        with self._state_lock:
            conns = list(self._conns.values())
        for c in conns:
            try:
                c.sock.close()
            except OSError:
                pass
        if self._server is not None:
            self._server.close()
        if self._log is not None:
            self._log.close()
            self._log = None

    def __enter__(self) -> "Brain":
        if self.address is None:
            self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def wait_for_byes(self, n: int, timeout: float | None = None) -> bool:
        with self._bye_event:
            return self._bye_event.wait_for(lambda: len(self.byes) >= n, timeout=timeout)

    def wait_for_snapshots(self, n: int, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if len(self.snapshots) >= n:
                return True
            time.sleep(0.01)
        return len(self.snapshots) >= n

    def set_target(self, unit: int, label: str) -> None:
        """Retarget a connected unit; takes effect at its next control step."""
        target_band(label)
        self._inbox.put(("set_target", unit, label))

    def snapshots_for(self, unit: int) -> list[TelemetrySnapshot]:
        return [s for s in self.snapshots if s.unit == unit]

    # threads

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._stop.is_set():
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            th = threading.Thread(target=self._handle, args=(_Conn(sock),), daemon=True)
            th.start()

    def _handle(self, conn: _Conn) -> None:
        reader = conn.sock.makefile("rb")
        try:
            for line in reader:
                if not line.strip():
                    continue
                try:
                    msg = decode(line)
                except ProtocolError as exc:
                    log.warning("dropping connection: %s", exc)
                    self._inbox.put(("malformed", conn, str(exc)))
                    break
                self._inbox.put(("msg", conn, msg))
        except OSError:
            pass
        finally:
            reader.close()
            try:
                conn.sock.close()
            except OSError:
                pass
            self._inbox.put(("closed", conn, None))

    def _aggregate_loop(self) -> None:
        while True:
            item = self._inbox.get()
            if item is None:
                break
            tag, a, b = item
            try:
                if tag == "msg":
                    self._ingest(a, b)
                elif tag == "malformed":
                    self.malformed += 1
                elif tag == "closed":
                    self._drop(a)
                elif tag == "set_target":
                    self._retarget(a, b)
            except OSError as exc:
                log.warning("send failed: %s", exc)

    # aggregator-only helpers

    def _write_log(self, msg: FleetMessage) -> None:
        if self._log is not None:
            self._log.write(encode(msg).decode("utf-8"))
            self._log.flush()

    def _send(self, unit: int, kind: str, payload: dict[str, Any]) -> None:
        with self._state_lock:
            conn = self._conns.get(unit)
        if conn is None:
            return
        self._out_seq += 1
        msg = FleetMessage(kind, unit, self._out_seq, payload)
        self._write_log(msg)
        conn.send(encode(msg))

    def _set_target_payload(self, label: str) -> dict[str, Any]:
        return {"target": label, "merge_every": self.config.merge_every}

    def _drop(self, conn: _Conn) -> None:
        with self._state_lock:
            if conn.unit is not None and self._conns.get(conn.unit) is conn:
                del self._conns[conn.unit]
        if conn.unit is not None:
            self._pending.pop(conn.unit, None)

    def _retarget(self, unit: int, label: str) -> None:
        self._targets[unit] = label
        self._pending.pop(unit, None)
        self._send(unit, "SET_TARGET", self._set_target_payload(label))

    def _ingest(self, conn: _Conn, msg: FleetMessage) -> None:
        if conn.unit is not None and msg.unit != conn.unit:
            log.warning("unit %d sent a frame claiming unit %d; ignored", conn.unit, msg.unit)
            self.malformed += 1
            return
        if not self.seq.accept(msg.unit, msg.seq):
            log.warning("seq regression from unit %d (seq %d); discarded", msg.unit, msg.seq)
            return
        self._write_log(msg)
        if msg.kind == "HELLO":
            conn.unit = msg.unit
            with self._state_lock:
                self._conns[msg.unit] = conn
            self.hellos.append(msg.unit)
            label = self._targets.setdefault(msg.unit, self.config.target_for(msg.unit))
            self._send(msg.unit, "SET_TARGET", self._set_target_payload(label))
        elif msg.kind == "TELEMETRY":
            try:
                self.snapshots.append(TelemetrySnapshot.from_message(msg))
            except (ProtocolError, ValueError) as exc:
                log.warning("bad telemetry from unit %d: %s", msg.unit, exc)
                self.malformed += 1
        elif msg.kind == "QSYNC_PUSH":
            self._on_push(msg)
        elif msg.kind == "BYE":
            with self._bye_event:
                self.byes.append(msg.unit)
                self._bye_event.notify_all()
        else:
            log.warning("unit %d sent brain-only kind %s; ignored", msg.unit, msg.kind)

    def _on_push(self, msg: FleetMessage) -> None:
        try:
            table = QTable.from_dict(msg.payload["table"])
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("bad QSYNC_PUSH from unit %d: %s", msg.unit, exc)
            self.malformed += 1
            return
        self._pending[msg.unit] = table
        label = self._targets.get(msg.unit)
        with self._state_lock:
            connected = set(self._conns)
        group = sorted(u for u in connected if self._targets.get(u) == label)
        if not all(u in self._pending for u in group):
            return
        tables = [self._pending.pop(u) for u in group]
        try:
            merged = merge_qtables(tables)
        except ValueError as exc:
            log.warning("merge for %s skipped: %s", label, exc)
            return
        self.merges.append({"target": label, "units": group})
        payload = {"target": label, "units": group, "table": merged.to_dict()}
        for u in group:
            self._send(u, "QSYNC_MERGED", payload)


def brain_serve(
    address: str,
    config: BrainConfig | None = None,
    *,
    expect_units: int | None = None,
    duration_s: float | None = None,
) -> Brain:
    """Run a brain in the foreground until ``expect_units`` said BYE or time runs out."""
    brain = Brain(config)
    brain.start(address)
    try:
        if expect_units is not None:
            brain.wait_for_byes(expect_units, timeout=duration_s)
        elif duration_s is not None:
            time.sleep(duration_s)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        brain.stop()
    return brain


# -- unit -----------------------------------------------------------------------


@dataclass
class UnitConfig:
    unit_id: int
    trial: TrialConfig = field(default_factory=TrialConfig)
    telemetry_every: int = 10
    buffer_size: int = 256
    stop_on_converge: bool = True
    wait_for_target_s: float = 0.0
    backoff_initial_s: float = 0.05
    backoff_max_s: float = 2.0
    connect_timeout_s: float = 1.0
    flush_timeout_s: float = 2.0
    step_delay_s: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.unit_id <= UNIT_ID_MAX:
            raise ValueError("unit_id must be a 32-bit unsigned integer")
        if self.telemetry_every < 1 or self.buffer_size < 1:
            raise ValueError("telemetry_every and buffer_size must be >= 1")


@dataclass
class UnitResult:
    record: EpisodeRecord
    telemetry_emitted: int
    telemetry_sent: int
    dropped: int
    connected: bool
    target_changes: list[tuple[int, str]]
    merges_applied: int
    merges_rejected: int


class _Link:
    """Background connection to the brain with reconnect and a bounded outbox."""

    def __init__(self, address: tuple[str, int], cfg: UnitConfig):
        self.address = address
        self.cfg = cfg
        self.outbox: deque[tuple[str, dict[str, Any]]] = deque()
        self.inbox: queue.Queue[FleetMessage] = queue.Queue()
        self.dropped = 0
        self.sent_telemetry = 0
        self.ever_connected = False
        self.failed_connects = 0
        self._seq = 0
        self._cv = threading.Condition()
        self._closing = False
        self._sock: socket.socket | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def post(self, kind: str, payload: dict[str, Any]) -> None:
        with self._cv:
            if len(self.outbox) >= self.cfg.buffer_size:
                self.outbox.popleft()
                self.dropped += 1
            self.outbox.append((kind, payload))
            self._cv.notify()

    def close(self, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._cv:
            self._cv.wait_for(
                lambda: not self.outbox or (self._sock is None and self.failed_connects > 0), timeout=timeout
            )
            self._closing = True
            self._cv.notify_all()
        self._thread.join(timeout=max(0.0, deadline - time.monotonic()) + 0.5)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    def _frame(self, kind: str, payload: dict[str, Any]) -> bytes:
        self._seq += 1
        return encode(FleetMessage(kind, self.cfg.unit_id, self._seq, payload))

    def _connect(self) -> bool:
        try:
            sock = socket.create_connection(self.address, timeout=self.cfg.connect_timeout_s)
        except OSError:
            return False
        sock.settimeout(None)
        sock.sendall(self._frame("HELLO", {}))
        self._sock = sock
        self.ever_connected = True
        threading.Thread(target=self._read, args=(sock,), daemon=True).start()
        return True

    def _read(self, sock: socket.socket) -> None:
        try:
            with sock.makefile("rb") as fh:
                for line in fh:
                    if line.strip():
                        try:
                            self.inbox.put(decode(line))
                        except ProtocolError as exc:
                            log.warning("unit %d: bad frame from brain: %s", self.cfg.unit_id, exc)
        except (OSError, ValueError):
            pass
        with self._cv:
            if self._sock is sock:
                self._sock = None
            self._cv.notify_all()

    def _run(self) -> None:
        backoff = self.cfg.backoff_initial_s
        while True:
            with self._cv:
                if self._closing:
                    break
            if self._sock is None:
                if self._connect():
                    backoff = self.cfg.backoff_initial_s
                else:
                    with self._cv:
                        self.failed_connects += 1
                        self._cv.notify_all()
                        self._cv.wait_for(lambda: self._closing, timeout=backoff)
                    backoff = min(self.cfg.backoff_max_s, backoff * 2)
                    continue
            with self._cv:
                self._cv.wait_for(lambda: self.outbox or self._closing or self._sock is None, timeout=0.5)
                if not self.outbox or self._sock is None:
                    continue
                kind, payload = self.outbox[0]
                sock = self._sock
            try:
                sock.sendall(self._frame(kind, payload))
            except OSError:
                with self._cv:
                    if self._sock is sock:
                        self._sock = None
                continue
            with self._cv:
                if self.outbox and self.outbox[0][1] is payload:
                    self.outbox.popleft()
                if kind == "TELEMETRY":
                    self.sent_telemetry += 1
                self._cv.notify_all()
        sock = self._sock
        if sock is not None:
            try:
                sock.sendall(self._frame("BYE", {}))
            except OSError:
                pass


def unit_run(connect_address: str | tuple[str, int] | None, cfg: UnitConfig, agent: QAgent | None = None) -> UnitResult:
    """Run one unit's control loop, talking to the brain when it can.

    With ``connect_address=None`` or an unreachable brain the trajectory is
    exactly the one :func:`luxloop.harness.run_trial` produces for the same
    trial config.
    """
    link = None
    if connect_address is not None:
        addr = parse_address(connect_address) if isinstance(connect_address, str) else connect_address
        link = _Link(addr, cfg)
        link.start()

    runner = TrialRunner(cfg.trial, agent, stop_on_converge=cfg.stop_on_converge)
    changes: list[tuple[int, str]] = []
    applied = rejected = emitted = 0
    merge_every: int | None = None

    def handle(msg: FleetMessage) -> None:
        nonlocal applied, rejected, merge_every
        if msg.kind == "SET_TARGET":
            label = msg.payload.get("target")
            try:
                target = target_band(label)
            except ValueError as exc:
                log.warning("unit %d: ignoring SET_TARGET: %s", cfg.unit_id, exc)
                return
            merge_every = msg.payload.get("merge_every")
            if target != runner.target:
                changes.append((runner.t, label))
            runner.set_target(target)
        elif msg.kind == "QSYNC_MERGED":
            try:
                merged = QTable.from_dict(msg.payload["table"])
            except (KeyError, TypeError, ValueError) as exc:
                log.warning("unit %d: unreadable merged table: %s", cfg.unit_id, exc)
                rejected += 1
                return
            mine = runner.agent.table
            if merged.shape != mine.shape or merged.action_deltas != mine.action_deltas:
                log.warning("unit %d: rejected merged table %s, local is %s", cfg.unit_id, merged.shape, mine.shape)
                rejected += 1
                return
            runner.agent.table = merged
            applied += 1

    def drain() -> None:
        if link is None:
            return
        while True:
            try:
                handle(link.inbox.get_nowait())
            except queue.Empty:
                return

    if link is not None and cfg.wait_for_target_s > 0:
        try:
            handle(link.inbox.get(timeout=cfg.wait_for_target_s))
        except queue.Empty:
            log.warning("unit %d: no target from brain, running on local config", cfg.unit_id)

    start = time.perf_counter_ns()
    while not runner.done:
        drain()
        _, _, smoothed, state, _, pwm, _, eps = runner.step()
        t = runner.t
        if link is not None and t % cfg.telemetry_every == 0:
            snap = TelemetrySnapshot(cfg.unit_id, t, smoothed, state, pwm, eps, runner.converged, runner.target.label)
            link.post("TELEMETRY", snap.to_payload())
            emitted += 1
        if link is not None and merge_every and t % merge_every == 0:
            link.post("QSYNC_PUSH", {"t": t, "table": runner.agent.table.to_dict()})
        if cfg.step_delay_s > 0:
            time.sleep(cfg.step_delay_s)
    wall_ms = (time.perf_counter_ns() - start) / 1e6

    if link is not None:
        link.close(cfg.flush_timeout_s)
        if not link.ever_connected:
            log.warning("unit %d: brain unreachable, ran standalone", cfg.unit_id)
    return UnitResult(
        record=runner.record(wall_ms),
        telemetry_emitted=emitted,
        telemetry_sent=link.sent_telemetry if link else 0,
        dropped=link.dropped if link else 0,
        connected=bool(link and link.ever_connected),
        target_changes=changes,
        merges_applied=applied,
        merges_rejected=rejected,
    )
