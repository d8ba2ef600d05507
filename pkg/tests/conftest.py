from __future__ import annotations

import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(n, name, passed, detail)``."""

    def record(n: int, name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((n, name, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {n}. {name}: {detail}")


@pytest.fixture(scope="session")
def cli_sweeps(tmp_path_factory):
    """The default CLI sweep run twice with one worker and once with eight."""
    import time

    from luxloop.cli import main

    root = tmp_path_factory.mktemp("sweeps")
    out = {}
    for name, workers in (("a", 1), ("b", 1), ("c", 8)):
        t0 = time.perf_counter()
        status = main(["sweep", "--out", str(root), "--run-id", name, "--workers", str(workers)])
        out[name] = (root / name, status, time.perf_counter() - t0)
    return out
