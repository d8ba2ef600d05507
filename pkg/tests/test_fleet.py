from __future__ import annotations

import itertools
import json
import socket
import threading
import time

import numpy as np
import pytest

from luxloop.core_rl import QTable
from luxloop.env_sim import target_band
from luxloop.fleet import (
    KINDS,
    Brain,
    BrainConfig,
    FleetMessage,
    ProtocolError,
    SeqTracker,
    TelemetrySnapshot,
    UnitConfig,
    decode,
    encode,
    merge_qtables,
    parse_address,
    read_log,
    unit_run,
)
from luxloop.harness import TrialConfig, run_trial

DELTAS = (-32, -8, 0, 8, 32)


def _table(seed: int, deltas=DELTAS) -> QTable:
    rng = np.random.default_rng(seed)
    return QTable(deltas, values=rng.normal(size=(64, len(deltas))), visit_counts=rng.integers(0, 50, (64, len(deltas))))


class RawClient:
    def __init__(self, addr, unit: int):
        self.sock = socket.create_connection(addr, timeout=5)
        self.reader = self.sock.makefile("rb")
        self.unit = unit
        self.seq = 0

    def send(self, kind: str, payload=None, seq: int | None = None) -> None:
        self.seq = self.seq + 1 if seq is None else seq
        self.sock.sendall(encode(FleetMessage(kind, self.unit, self.seq, payload or {})))

    def recv(self) -> FleetMessage:
        return decode(self.reader.readline())

    def close(self) -> None:
        self.reader.close()
        self.sock.close()


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- protocol -------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_each_kind(kind):
    m = FleetMessage(kind, 7, 3, {"a": [1, 2.5, None], "b": {"c": "ü"}})
    assert decode(encode(m)) == m
    assert encode(m).endswith(b"\n") and encode(m).count(b"\n") == 1


def test_wire_schema():
    d = json.loads(encode(FleetMessage("BYE", 1, 2)))
    assert d == {"kind": "BYE", "unit": 1, "seq": 2, "payload": {}}


@pytest.mark.parametrize(
    "frame",
    [
        b"not json\n",
        b'{"kind": "PING", "unit": 1, "seq": 1, "payload": {}}\n',
        b'{"kind": "BYE", "unit": -1, "seq": 1, "payload": {}}\n',
        b'{"kind": "BYE", "unit": 4294967296, "seq": 1, "payload": {}}\n',
        b'{"kind": "BYE", "unit": 1, "seq": 1.5, "payload": {}}\n',
        b'{"kind": "BYE", "unit": 1, "seq": 1, "payload": []}\n',
        b'{"kind": "BYE", "unit": 1, "seq": 1}\n',
        b'{"kind": "BYE", "unit": true, "seq": 1, "payload": {}}\n',
        b"\xff\xfe\n",
    ],
)
def test_decode_rejects(frame):
    with pytest.raises(ProtocolError):
        decode(frame)


def test_seq_tracker():
    s = SeqTracker()
    assert s.accept(1, 1) and s.accept(1, 5) and s.accept(2, 1)
    assert not s.accept(1, 5) and not s.accept(1, 2)
    assert s.regressions == 2


def test_snapshot_validation():
    ok = TelemetrySnapshot(1, 10, 300.0, 18, 8, 0.3, False, "L4")
    assert TelemetrySnapshot.from_message(FleetMessage("TELEMETRY", 1, 1, ok.to_payload())) == ok
    for bad in ({"state": 64}, {"pwm": 256}, {"epsilon": 1.5}, {"smoothed": 2000.0}, {"t": -1}):
        with pytest.raises(ValueError):
            TelemetrySnapshot(**{**ok.__dict__, **bad})


def test_parse_address():
    assert parse_address("127.0.0.1:7070") == ("127.0.0.1", 7070)
    for bad in ("nohost", ":80", "h:port", "h:70000"):
        with pytest.raises(ValueError):
            parse_address(bad)


# -- merging --------------------------------------------------------------------


def test_merge_examples():
    t = _table(1)
    one = merge_qtables([t])
    np.testing.assert_array_equal(one.values, t.values)
    neg = QTable(DELTAS, values=-t.values)
    assert np.all(merge_qtables([t, neg]).values == 0)
    tabs = [QTable.zeros(DELTAS) for _ in range(3)]
    for tb, v in zip(tabs, (0.1, 0.2, 0.6)):
        tb.values[4, 2] = v
    assert merge_qtables(tabs).values[4, 2] == pytest.approx(0.3, abs=1e-15)


def test_merge_against_elementwise_script():
    tabs = [_table(s) for s in range(4)]
    merged = merge_qtables(tabs)
    for s in range(64):
        for a in range(5):
            vals = [tb.values[s, a] for tb in tabs]
            assert merged.values[s, a] == pytest.approx(sum(vals) / len(vals), abs=1e-15)
            assert merged.visit_counts[s, a] == sum(int(tb.visit_counts[s, a]) for tb in tabs)


def test_merge_permutation_invariant_and_idempotent():
    tabs = [_table(s) for s in range(3)]
    ref = merge_qtables(tabs)
    for perm in itertools.permutations(tabs):
        np.testing.assert_array_equal(merge_qtables(list(perm)).values, ref.values)
    t = _table(9)
    np.testing.assert_array_equal(merge_qtables([t, t.copy(), t.copy()]).values, t.values)


def test_merge_rejects_mismatch():
    with pytest.raises(ValueError):
        merge_qtables([])
    with pytest.raises(ValueError):
        merge_qtables([_table(1), _table(2, deltas=(-8, 0, 8))])
    with pytest.raises(ValueError):
        merge_qtables([_table(1), _table(2, deltas=(-16, -8, 0, 8, 16))])


# -- brain ----------------------------------------------------------------------


def test_hello_gets_configured_target(tmp_path):
    log = tmp_path / "brain.ndjson"
    with Brain(BrainConfig(default_target="L2", targets={5: "L9"}, log_path=log)) as brain:
        for unit, label in ((5, "L9"), (6, "L2")):
            c = RawClient(brain.address, unit)
            c.send("HELLO")
            reply = c.recv()
            assert (reply.kind, reply.unit, reply.payload["target"]) == ("SET_TARGET", unit, label)
            c.close()
    kinds = [m.kind for m in read_log(log)]
    assert kinds.count("HELLO") == 2 and kinds.count("SET_TARGET") == 2


def test_seq_regression_is_discarded():
    with Brain() as brain:
        c = RawClient(brain.address, 1)
        c.send("HELLO", seq=1)
        c.recv()
        snap = TelemetrySnapshot(1, 1, 100.0, 6, 0, 0.5, False).to_payload()
        c.send("TELEMETRY", snap, seq=5)
        c.send("TELEMETRY", {**snap, "t": 2}, seq=3)
        c.send("TELEMETRY", {**snap, "t": 3}, seq=6)
        assert brain.wait_for_snapshots(2)
        time.sleep(0.1)
        assert [s.t for s in brain.snapshots] == [1, 3]
        assert brain.seq.regressions == 1
        c.close()


def test_malformed_frame_drops_connection():
    with Brain() as brain:
        c = RawClient(brain.address, 1)
        c.sock.sendall(b'{"kind": "SHOUT", "unit": 1, "seq": 1, "payload": {}}\n')
        assert c.reader.readline() == b""
        deadline = time.monotonic() + 5
        while brain.malformed == 0 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert brain.malformed == 1
        c.close()


def test_pushes_are_mean_merged():
    with Brain(BrainConfig(default_target="L5", merge_every=100)) as brain:
        a, b = RawClient(brain.address, 1), RawClient(brain.address, 2)
        for c in (a, b):
            c.send("HELLO")
            assert c.recv().payload == {"target": "L5", "merge_every": 100}
        ta, tb = _table(1), _table(2)
        a.send("QSYNC_PUSH", {"t": 100, "table": ta.to_dict()})
        b.send("QSYNC_PUSH", {"t": 100, "table": tb.to_dict()})
        for c in (a, b):
            msg = c.recv()
            assert msg.kind == "QSYNC_MERGED" and msg.payload["units"] == [1, 2]
            merged = QTable.from_dict(msg.payload["table"])
            np.testing.assert_allclose(merged.values, (ta.values + tb.values) / 2, rtol=0, atol=1e-15)
            np.testing.assert_array_equal(merged.visit_counts, ta.visit_counts + tb.visit_counts)
        a.close()
        b.close()


def test_four_units_hundred_steps_fill_store():
    with Brain() as brain:
        results = {}

        def go(u):
            cfg = UnitConfig(u, TrialConfig(max_steps=100, seed=u), telemetry_every=1, stop_on_converge=False)
            results[u] = unit_run(brain.address, cfg)

        threads = [threading.Thread(target=go, args=(u,)) for u in range(1, 5)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert brain.wait_for_snapshots(400)
        assert brain.wait_for_byes(4, timeout=5)
        assert len(brain.snapshots) == 400
        assert all(len(brain.snapshots_for(u)) == 100 for u in range(1, 5))
        assert all(r.dropped == 0 and r.telemetry_sent == 100 for r in results.values())


# -- unit -----------------------------------------------------------------------


def test_telemetry_cadence():
    with Brain() as brain:
        res = unit_run(brain.address, UnitConfig(3, TrialConfig(max_steps=100), telemetry_every=10, stop_on_converge=False))
        assert brain.wait_for_byes(1, timeout=5)
        assert res.telemetry_emitted == 10 and res.telemetry_sent == 10
        assert [s.t for s in brain.snapshots] == list(range(10, 101, 10))


def test_offline_unit_matches_standalone_trial():
    trial = TrialConfig(target=target_band("L6"), seed=31)
    res = unit_run(("127.0.0.1", _free_port()), UnitConfig(2, trial))
    assert not res.connected
    ref = run_trial(trial)
    assert res.record.to_csv() == ref.to_csv()
    assert unit_run(None, UnitConfig(2, trial)).record.to_csv() == ref.to_csv()


def test_full_buffer_drops_oldest():
    res = unit_run(
        ("127.0.0.1", _free_port()),
        UnitConfig(4, TrialConfig(max_steps=100), telemetry_every=1, buffer_size=5, stop_on_converge=False),
    )
    assert res.telemetry_emitted == 100 and res.dropped == 95 and res.telemetry_sent == 0


def test_unit_reconnects_with_backoff():
    port = _free_port()
    brain = Brain()
    started = threading.Event()

    def late_start():
        time.sleep(0.3)
        brain.start(("127.0.0.1", port))
        started.set()

    threading.Thread(target=late_start).start()
    cfg = UnitConfig(
        8, TrialConfig(max_steps=3000), telemetry_every=100, stop_on_converge=False, step_delay_s=0.0005
    )
    res = unit_run(("127.0.0.1", port), cfg)
    started.wait(5)
    try:
        assert res.connected and res.telemetry_sent > 0
        assert brain.wait_for_byes(1, timeout=5)
        assert len(brain.snapshots) == res.telemetry_sent
    finally:
        brain.stop()


def test_set_target_mid_run_reconverges():
    with Brain(BrainConfig(default_target="L1")) as brain:
        cfg = UnitConfig(
            1, TrialConfig(max_steps=20000, seed=2), telemetry_every=20, stop_on_converge=False,
            wait_for_target_s=2.0, step_delay_s=0.0002,
        )
        out = {}
        th = threading.Thread(target=lambda: out.setdefault("r", unit_run(brain.address, cfg)))
        th.start()
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline and not any(s.converged for s in brain.snapshots):
            time.sleep(0.02)
        brain.set_target(1, "L6")
        th.join()
        res = out["r"]
        (switch_t, label), = res.target_changes
        assert label == "L6" and switch_t > 0
        after = [s for s in brain.snapshots if s.t > switch_t]
        assert after and all(s.target == "L6" for s in after)
        assert any(s.converged for s in after)
        assert res.record.target == "L6"


class _FakeBrain:
    """Answers HELLO with a scripted QSYNC_MERGED."""

    def __init__(self, table: QTable):
        self.srv = socket.socket()
        self.srv.bind(("127.0.0.1", 0))
        self.srv.listen()
        self.address = self.srv.getsockname()
        self.table = table
        threading.Thread(target=self._serve, daemon=True).start()

    def _serve(self):
        conn, _ = self.srv.accept()
        with conn, conn.makefile("rb") as fh:
            hello = decode(fh.readline())
            conn.sendall(encode(FleetMessage("QSYNC_MERGED", hello.unit, 1, {"table": self.table.to_dict()})))
            for _ in fh:
                pass


@pytest.mark.parametrize("deltas, applied", [(DELTAS, 1), ((-8, 0, 8), 0)])
def test_merged_table_applied_only_when_shapes_match(deltas, applied):
    fake = _FakeBrain(_table(5, deltas))
    cfg = UnitConfig(1, TrialConfig(max_steps=2000), stop_on_converge=False, step_delay_s=0.0002)
    res = unit_run(fake.address, cfg)
    fake.srv.close()
    assert res.merges_applied == applied and res.merges_rejected == 1 - applied
    assert res.record.qtable.shape == (64, 5)
