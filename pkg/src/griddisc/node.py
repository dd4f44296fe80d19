"""The runnable discovery daemon (``griddisc-node``).

A node owns one store, one registry, one UDP socket for replication and one
RPC server. A hub is the same thing plus fanout to the nodes it hears from.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from griddisc.errors import ConfigError
from griddisc.model import now_micros
from griddisc.registry import Registry
from griddisc.replication import Address, PeerMode, PeerSet, Replicator, SequenceState, UdpTransport
from griddisc.rpc import RpcServer
from griddisc.storage import BackendDescriptor, BackendKind, Store, open_store

logger = logging.getLogger(__name__)

NODE_ID_FILE = "node_id"


@dataclass(frozen=True)
class NodeConfig:
    node_id: Optional[bytes] = None
    http_bind: Address = ("127.0.0.1", 8080)
    udp_bind: Address = ("127.0.0.1", 9010)
    role: str = "node"
    peers: Optional[PeerSet] = None
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    default_lease_secs: int = 3600
    sweep_interval_ms: int = 1000
    tombstone_window_secs: int = 3600
    heartbeat_secs: float = 30
    # None disables periodic re-push
    repush_secs: Optional[float] = 300
    log_level: str = "INFO"

    def __post_init__(self):
        if self.role not in ("node", "hub"):
            raise ConfigError("role", f"must be node or hub, got {self.role!r}")
        if self.role == "hub" and self.peers is not None:
            raise ConfigError("peer", "a hub learns its nodes; it takes no --peer or --hub")
        if self.http_bind[1] and self.http_bind[1] == self.udp_bind[1]:
            raise ConfigError("udp-bind", "HTTP and UDP ports must differ")
        for key, value in (
            ("default-lease", self.default_lease_secs),
            ("sweep-interval-ms", self.sweep_interval_ms),
            ("tombstone-window", self.tombstone_window_secs),
            ("heartbeat-secs", self.heartbeat_secs),
        ):
            if value <= 0:
                raise ConfigError(key, "must be positive")
        if self.repush_secs is not None and self.repush_secs <= 0:
            raise ConfigError("repush-secs", "must be positive")
        if self.node_id is not None and len(self.node_id) != 16:
            raise ConfigError("node-id", "must be 16 bytes")


# -- configuration ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("args", message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="griddisc-node", description="Run a discovery node or hub.")
    # every default is None so file values can be told apart from omitted flags
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--role", choices=["node", "hub"])
    p.add_argument("--http-bind", metavar="A:P")
    p.add_argument("--udp-bind", metavar="A:P")
    p.add_argument("--peer", action="append", metavar="A:P")
    p.add_argument("--hub", metavar="A:P")
    p.add_argument("--backend", choices=["memory", "persistent"])
    p.add_argument("--data-dir", metavar="DIR")
    p.add_argument("--capacity", metavar="N")
    p.add_argument("--default-lease", metavar="SECS")
    p.add_argument("--sweep-interval-ms", metavar="N")
    p.add_argument("--tombstone-window", metavar="SECS")
    p.add_argument("--heartbeat-secs", metavar="SECS")
    p.add_argument("--repush-secs", metavar="SECS", help="0 disables periodic re-push")
    p.add_argument("--log-level", metavar="L")
    return p


def read_config_file(path: str) -> dict[str, object]:
    """Flat ``key=value`` lines; keys are the long flag names. ``peer`` may repeat."""
    values: dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().lstrip("-"), value.strip()
        if not sep:
            raise ConfigError("config", f"{path}:{lineno}: expected key=value")
        if key == "peer":
            values.setdefault("peer", []).extend(v.strip() for v in value.split(",") if v.strip())
        else:
            values[key] = value
    return values


def parse_address(key: str, text: str) -> Address:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit() or int(port) > 65535:
        raise ConfigError(key, f"expected address:port, got {text!r}")
    return (host or "0.0.0.0", int(port))


def _positive_int(key: str, text) -> int:
    try:
        value = int(text)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise ConfigError(key, "must be positive")
    return value


def parse_config(args: Sequence[str] = (), file: Optional[str] = None) -> NodeConfig:
    """Build a NodeConfig from flags, with ``file`` (or ``--config``) supplying fallbacks."""
    ns = vars(_parser().parse_args(list(args)))
    file = ns.pop("config") or file
    merged: dict[str, object] = read_config_file(file) if file else {}
    known = {k.replace("_", "-") for k in ns}
    for key in merged:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    for key, value in ns.items():
        if value is not None:
            merged[key.replace("_", "-")] = value

    kwargs: dict[str, object] = {}
    if "role" in merged:
        kwargs["role"] = merged["role"]
    if "http-bind" in merged:
        kwargs["http_bind"] = parse_address("http-bind", merged["http-bind"])
    if "udp-bind" in merged:
        kwargs["udp_bind"] = parse_address("udp-bind", merged["udp-bind"])

    peers = merged.get("peer") or []
    if isinstance(peers, str):
        peers = [peers]
    hub = merged.get("hub")
    if hub and peers:
        raise ConfigError("hub", "use either --hub or --peer, not both")
    if hub:
        kwargs["peers"] = PeerSet(PeerMode.HUB, (parse_address("hub", hub),))
    elif peers:
        kwargs["peers"] = PeerSet(PeerMode.MESH, tuple(parse_address("peer", p) for p in peers))

    kind = merged.get("backend", "memory")
    if kind not in ("memory", "persistent"):
        raise ConfigError("backend", f"must be memory or persistent, got {kind!r}")
    data_dir = merged.get("data-dir")
    if kind == "persistent" and not data_dir:
        raise ConfigError("data-dir", "the persistent backend needs --data-dir")
    capacity = _positive_int("capacity", merged["capacity"]) if "capacity" in merged else None
    kwargs["backend"] = BackendDescriptor(BackendKind(kind), data_dir, capacity)

    for key, attr in (
        ("default-lease", "default_lease_secs"),
        ("sweep-interval-ms", "sweep_interval_ms"),
        ("tombstone-window", "tombstone_window_secs"),
        ("heartbeat-secs", "heartbeat_secs"),
    ):
        if key in merged:
            kwargs[attr] = _positive_int(key, merged[key])
    if "repush-secs" in merged:
        try:
            repush = int(merged["repush-secs"])
        except ValueError:
            raise ConfigError("repush-secs", f"expected an integer, got {merged['repush-secs']!r}") from None
        kwargs["repush_secs"] = repush if repush > 0 else None
    if "log-level" in merged:
        level = str(merged["log-level"]).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigError("log-level", f"unknown level {merged['log-level']!r}")
        kwargs["log_level"] = level
    return NodeConfig(**kwargs)


# -- the daemon ----------------------------------------------------------------


class StartupError(Exception):
    def __init__(self, subsystem: str, cause: BaseException):
        super().__init__(f"{subsystem}: {cause}")
        self.subsystem = subsystem


def load_node_id(backend: BackendDescriptor) -> bytes:
    """Persisted under the data dir for the persistent backend, fresh otherwise."""
    if backend.kind is not BackendKind.PERSISTENT:
        return uuid.uuid4().bytes
    path = Path(backend.location) / NODE_ID_FILE
    if path.exists():
        return uuid.UUID(path.read_text().strip()).bytes
    node_id = uuid.uuid4()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(f"{node_id}\n")
    tmp.replace(path)
    return node_id.bytes


class Node:
    def __init__(self, config: NodeConfig, clock: Callable[[], int] = now_micros):
        self.config = config
        self.clock = clock
        self.store: Optional[Store] = None
        self.registry: Optional[Registry] = None
        self.transport: Optional[UdpTransport] = None
        self.replicator: Optional[Replicator] = None
        self.rpc: Optional[RpcServer] = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def http_address(self) -> Address:
        return self.rpc.address

    @property
    def udp_address(self) -> Address:
        return self.transport.address

    @property
    def url(self) -> str:
        return self.rpc.url

    def start(self) -> "Node":
        cfg = self.config
        try:
            self._start_step("storage", self._open_storage)
            self._start_step("udp", self._open_udp)
            self._start_step("replication", self.replicator.startup_sync)
            self._start_step("rpc", self._open_rpc)
        except StartupError:
            self.stop()
            raise
        self._spawn("sweeper", cfg.sweep_interval_ms / 1000, self._sweep)
        if cfg.role == "node" and cfg.peers is not None:
            self._spawn("heartbeat", cfg.heartbeat_secs, self.replicator.heartbeat)
        if cfg.repush_secs is not None:
            self._spawn("repush", cfg.repush_secs, self.replicator.repush)
        logger.info(
            "%s %s up: rpc %s, udp %s:%d, %d records",
            cfg.role,
            uuid.UUID(bytes=self.registry.node_id),
            self.url,
            *self.udp_address,
            len(self.store),
        )
        return self

    def _start_step(self, subsystem: str, step: Callable[[], object]):
        try:
            step()
        except Exception as exc:
            raise StartupError(subsystem, exc) from exc

    def _open_storage(self):
        cfg = self.config
        self.store = open_store(cfg.backend)
        node_id = cfg.node_id or load_node_id(cfg.backend)
        self.registry = Registry(self.store, node_id, cfg.tombstone_window_secs)

    def _open_udp(self):
        cfg = self.config
        self.transport = UdpTransport(cfg.udp_bind)
        self.replicator = Replicator(
            self.registry,
            self.transport.send,
            cfg.peers,
            cfg.role,
            # seeded from the clock so a restarted node never reuses a sequence number
            seq=SequenceState(self.clock()),
            heartbeat_secs=cfg.heartbeat_secs,
            clock=self.clock,
        )
        self.registry.add_listener(self.replicator.publish)
        self.transport.start(self.replicator.receive)

    def _open_rpc(self):
        self.rpc = RpcServer(self.config.http_bind, self.registry, self.clock, self.config.default_lease_secs).start()

    def _sweep(self):
        expired = self.registry.sweep_expired(self.clock())
        if expired:
            logger.info("expired %d records", expired)

    def _spawn(self, name: str, interval: float, action: Callable[[], object]):
        def loop():
            while not self._stop.wait(interval):
                try:
                    action()
                except Exception:
                    logger.exception("%s failed", name)

        thread = threading.Thread(target=loop, name=name, daemon=True)
        thread.start()
        self._threads.append(thread)

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self.rpc is not None:
            self.rpc.stop(timeout)
            self.rpc = None
        for thread in self._threads:
            thread.join(timeout)
        self._threads.clear()
        if self.transport is not None:
            self.transport.close(timeout)
            self.transport = None
        if self.store is not None:
            self.store.close()
            self.store = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run(config: NodeConfig, ready: Optional[Callable[[Node], None]] = None) -> int:
    """Run until SIGINT/SIGTERM. Returns the process exit status."""
    node = Node(config)
    try:
        node.start()
    except StartupError as exc:
        logger.error("startup failed in %s", exc)
        return 3
    stop = threading.Event()
    previous = {sig: signal.signal(sig, lambda *_: stop.set()) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        if ready is not None:
            ready(node)
        while not stop.wait(0.5):
            pass
    finally:
        logger.info("shutting down")
        node.stop()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config = parse_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"griddisc-node: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        stream=sys.stderr,
        level=config.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
