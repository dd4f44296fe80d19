import random
import uuid

import pytest

from griddisc.node import Node, NodeConfig
from griddisc.registry import Registry
from griddisc.storage import BackendDescriptor, BackendKind, LogStore, MemoryStore

T0 = 1_700_000_000_000_000  # an arbitrary wall clock, in microseconds


class FakeClock:
    def __init__(self, start: int = T0):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, secs: float = 0, micros: int = 0) -> int:
        self.now += int(secs * 1_000_000) + micros
        return self.now


def seeded_ids(seed: int):
    rng = random.Random(seed)
    return lambda: str(uuid.UUID(int=rng.getrandbits(128), version=4))


def node_id(n: int) -> bytes:
    return uuid.UUID(int=n + 1).bytes


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture(params=["memory", "persistent"])
def store(request, tmp_path):
    s = MemoryStore() if request.param == "memory" else LogStore(tmp_path / "store")
    yield s
    s.close()


@pytest.fixture
def registry(store):
    return Registry(store, node_id(0), id_factory=seeded_ids(0))


def local_config(**kwargs) -> NodeConfig:
    kwargs.setdefault("http_bind", ("127.0.0.1", 0))
    kwargs.setdefault("udp_bind", ("127.0.0.1", 0))
    kwargs.setdefault("repush_secs", None)
    return NodeConfig(**kwargs)


@pytest.fixture
def make_node():
    """Start in-process nodes on ephemeral ports; all are stopped at teardown."""
    started = []

    def factory(**kwargs) -> Node:
        node = Node(local_config(**kwargs)).start()
        started.append(node)
        return node

    yield factory
    for node in reversed(started):
        node.stop()


def persistent(path) -> BackendDescriptor:
    return BackendDescriptor(BackendKind.PERSISTENT, str(path))


# -- acceptance report ----------------------------------------------------------

_criteria = []


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    _criteria.append((marker.args[0], call.excinfo is None))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _criteria:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
