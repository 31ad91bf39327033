from __future__ import annotations

import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from fakes import FakeModel  # noqa: E402

from patdraft.gateway import Gateway, ReplayStore  # noqa: E402

FIXTURES = Path(__file__).resolve().parent / "fixtures"

_acceptance_results: list[tuple[str, str, str]] = []


class NetworkBlocked(RuntimeError):
    pass


def _no_network(self, address):
    if self.family in (socket.AF_INET, socket.AF_INET6):
        raise NetworkBlocked(f"network access attempted: {address!r}")
    return _real_connect(self, address)


_real_connect = socket.socket.connect


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")
    config.addinivalue_line("markers", "suite_timer: re-runs the whole suite; excluded from the inner run")
    # the suite must never touch the network; any attempt fails loudly
    socket.socket.connect = _no_network


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        _acceptance_results.append((str(number), title, "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    by_number: dict[str, tuple[str, str]] = {}
    for number, title, status in _acceptance_results:
        prev = by_number.get(number)
        if prev is None or status == "FAIL":
            by_number[number] = (title, status)
    for number in sorted(by_number, key=int):
        title, status = by_number[number]
        terminalreporter.write_line(f"[{status}] AC{number}: {title}")


@pytest.fixture
def fake_model() -> FakeModel:
    return FakeModel()


@pytest.fixture
def live_gateway(fake_model: FakeModel) -> Gateway:
    return Gateway(backend=fake_model, mode="live")


@pytest.fixture
def sample_dir() -> Path:
    return FIXTURES / "sample"


@pytest.fixture
def sample_cache(sample_dir: Path) -> ReplayStore:
    return ReplayStore(sample_dir / "cache")
