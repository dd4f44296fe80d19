"""Push replication of registry mutations over XDR/UDP.

A node publishes every local mutation as one datagram per target: in hub mode
the single target is the hub, in mesh mode every listed peer. The hub keeps
its own replica and forwards each new datagram, unchanged, to every other node
it has heard from. Receivers apply datagrams last-writer-wins on the record's
version stamp, so any delivery order converges to the same state.

Delivery is fire-and-forget. Lost datagrams are made up by the full push at
startup and by the optional periodic re-push.
"""

from __future__ import annotations

import enum
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from griddisc.errors import DecodeError, DiscoveryError, PayloadTooLarge
from griddisc.model import ServiceRecord, now_micros
from griddisc.registry import Registry
from griddisc.wire import MAX_DATAGRAM, Datagram, DeletePayload, Op, decode_datagram, encode_datagram

logger = logging.getLogger(__name__)

Address = tuple[str, int]
Sender = Callable[[bytes, Address], None]

DEDUP_WINDOW = 4096
DEFAULT_HEARTBEAT_SECS = 30
MISSED_HEARTBEATS = 3


class PeerMode(str, enum.Enum):
    HUB = "hub"
    MESH = "mesh"


@dataclass(frozen=True)
class PeerSet:
    mode: PeerMode
    endpoints: tuple[Address, ...]

    def __post_init__(self):
        object.__setattr__(self, "mode", PeerMode(self.mode))
        object.__setattr__(self, "endpoints", tuple((h, int(p)) for h, p in self.endpoints))
        if not self.endpoints:
            raise ValueError("a peer set needs at least one endpoint")
        if self.mode is PeerMode.HUB and len(self.endpoints) != 1:
            raise ValueError("hub mode takes exactly one endpoint")


class ApplyResult(enum.Enum):
    APPLIED = "applied"
    STALE = "stale"
    DUPLICATE = "duplicate"


class SequenceState:
    """Per-origin datagram counter; ``next()`` is called once per mutation."""

    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    @property
    def current(self) -> int:
        return self._value

    def next(self) -> int:
        with self._lock:
            self._value += 1
            return self._value


class DedupWindow:
    """Remembers the most recent ``size`` (origin, sequence) pairs per origin."""

    def __init__(self, size: int = DEDUP_WINDOW):
        self.size = size
        self._order: dict[bytes, deque] = {}
        self._seen: dict[bytes, set] = {}
        self._lock = threading.Lock()

    def check_and_add(self, origin: bytes, sequence: int) -> bool:
        """True when the pair was already seen; otherwise record it."""
        with self._lock:
            seen = self._seen.setdefault(origin, set())
            if sequence in seen:
                return True
            order = self._order.setdefault(origin, deque())
            if len(order) >= self.size:
                seen.discard(order.popleft())
            order.append(sequence)
            seen.add(sequence)
            return False


def apply_remote(d: Datagram, registry: Registry, dedup: Optional[DedupWindow] = None) -> ApplyResult:
    """Apply one decoded datagram to ``registry``.

    HEARTBEATs carry no registry state and always report APPLIED; liveness
    bookkeeping is the caller's job.
    """
    if d.op is Op.HEARTBEAT:
        return ApplyResult.APPLIED
    if dedup is not None and dedup.check_and_add(d.origin_node, d.sequence):
        return ApplyResult.DUPLICATE
    if d.op is Op.UPSERT:
        applied = registry.apply_upsert(d.payload)
    else:
        applied = registry.apply_delete(d.payload.service_id, d.payload.stamp)
    return ApplyResult.APPLIED if applied else ApplyResult.STALE


def mutation_datagram(record: ServiceRecord, origin: bytes, sequence: int) -> Datagram:
    if record.tombstone:
        return Datagram(Op.DELETE, origin, sequence, DeletePayload(record.service_id, record.stamp))
    return Datagram(Op.UPSERT, origin, sequence, record)


def send_all(data: bytes, targets, send: Sender) -> int:
    sent = 0
    for addr in targets:
        try:
            send(data, addr)
            sent += 1
        except OSError as exc:
            logger.warning("send to %s:%s failed: %s", addr[0], addr[1], exc)
    return sent


def publish_local_mutation(record: ServiceRecord, targets, seq: SequenceState, origin: bytes, send: Sender) -> int:
    """Send one datagram for ``record`` to every target; returns how many went out."""
    data = encode_datagram(mutation_datagram(record, origin, seq.next()))
    return send_all(data, targets, send)


@dataclass
class KnownNode:
    address: Address
    last_seen: float


@dataclass
class KnownNodes:
    """Hub membership, learned from datagram source addresses."""

    timeout: float = MISSED_HEARTBEATS * DEFAULT_HEARTBEAT_SECS
    clock: Callable[[], float] = time.monotonic
    nodes: dict[bytes, KnownNode] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def learn(self, origin: bytes, address: Address) -> None:
        with self._lock:
            self.nodes[origin] = KnownNode(address, self.clock())

    def targets(self, exclude_origin: Optional[bytes] = None, exclude_address: Optional[Address] = None) -> list[Address]:
        now = self.clock()
        with self._lock:
            for origin in [o for o, n in self.nodes.items() if now - n.last_seen > self.timeout]:
                logger.info("dropping silent node %s", origin.hex())
                del self.nodes[origin]
            skip = {exclude_address}
            if exclude_origin in self.nodes:
                skip.add(self.nodes[exclude_origin].address)
            return sorted({n.address for n in self.nodes.values()} - skip)


def hub_fanout(data: bytes, d: Datagram, known: KnownNodes, send: Sender, source: Optional[Address] = None) -> int:
    """Forward ``data`` to every known node except the one it came from."""
    return send_all(data, known.targets(d.origin_node, source), send)


class Replicator:
    """Ties a registry to a datagram sender and a peer set (or to hub membership).

    ``role`` is ``"node"`` or ``"hub"``. A hub has no static peers; it
    publishes to, and fans out among, the nodes it has heard from.
    """

    def __init__(
        self,
        registry: Registry,
        send: Sender,
        peers: Optional[PeerSet] = None,
        role: str = "node",
        seq: Optional[SequenceState] = None,
        dedup: Optional[DedupWindow] = None,
        heartbeat_secs: float = DEFAULT_HEARTBEAT_SECS,
        clock: Callable[[], int] = now_micros,
    ):
        if role not in ("node", "hub"):
            raise ValueError(f"unknown role {role!r}")
        self.registry = registry
        self.node_id = registry.node_id
        self.send = send
        self.peers = peers
        self.role = role
        self.seq = seq or SequenceState()
        self.dedup = dedup or DedupWindow()
        self.clock = clock
        self.known = KnownNodes(timeout=MISSED_HEARTBEATS * heartbeat_secs)
        # origin -> (address, monotonic time) of the last datagram from it
        self.liveness: dict[bytes, tuple[Address, float]] = {}
        self.decode_errors = 0

    @property
    def enabled(self) -> bool:
        return self.role == "hub" or self.peers is not None

    def targets(self) -> list[Address]:
        if self.role == "hub":
            return self.known.targets()
        return list(self.peers.endpoints) if self.peers else []

    def publish(self, record: ServiceRecord) -> int:
        """Registry listener: push one local mutation. Never raises."""
        if not self.enabled:
            return 0
        try:
            return publish_local_mutation(record, self.targets(), self.seq, self.node_id, self.send)
        except (PayloadTooLarge, ValueError) as exc:
            logger.error("cannot publish %s: %s", record.service_id, exc)
            return 0

    def heartbeat(self) -> int:
        if self.role == "hub" or not self.enabled:
            return 0
        data = encode_datagram(Datagram(Op.HEARTBEAT, self.node_id, self.seq.current))
        return send_all(data, self.targets(), self.send)

    def push_state(self, include_tombstones: bool = False) -> int:
        now = self.clock()
        sent = 0
        for record in self.registry.records():
            if record.live(now) or (include_tombstones and record.tombstone):
                sent += self.publish(record)
        return sent

    def startup_sync(self) -> int:
        """Announce ourselves (hub mode) and push every live record."""
        if not self.enabled:
            return 0
        sent = 0
        if self.peers is not None and self.peers.mode is PeerMode.HUB:
            sent += self.heartbeat()
        return sent + self.push_state()

    def repush(self) -> int:
        return self.push_state(include_tombstones=True) if self.enabled else 0

    def receive(self, data: bytes, source: Address) -> Optional[ApplyResult]:
        """Handle one inbound datagram. Malformed input is counted and dropped."""
        try:
            d = decode_datagram(data)
        except DecodeError as exc:
            self.decode_errors += 1
            logger.debug("dropping datagram from %s: %s", source, exc)
            return None
        if d.origin_node == self.node_id:
            return ApplyResult.DUPLICATE
        self.liveness[d.origin_node] = (source, time.monotonic())
        if self.role == "hub":
            self.known.learn(d.origin_node, source)
        try:
            result = apply_remote(d, self.registry, self.dedup)
        except DiscoveryError as exc:
            logger.warning("cannot apply datagram from %s: %s", source, exc)
            return None
        if self.role == "hub" and d.op is not Op.HEARTBEAT and result is not ApplyResult.DUPLICATE:
            hub_fanout(data, d, self.known, self.send, source)
        return result


class UdpTransport:
    """One UDP socket used for both sending and receiving.

    Sending from the bound socket matters: the hub learns a node's reply
    address from the source of its datagrams.
    """

    def __init__(self, bind: Address):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
            self.sock.bind(bind)
        except OSError:
            self.sock.close()
            raise
        self.sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Address:
        return self.sock.getsockname()

    def send(self, data: bytes, addr: Address) -> None:
        self.sock.sendto(data, addr)

    def start(self, handler: Callable[[bytes, Address], object]) -> None:
        def loop():
            while not self._stop.is_set():
                try:
                    data, addr = self.sock.recvfrom(MAX_DATAGRAM + 1)
                except socket.timeout:
                    continue
                except OSError:
                    if self._stop.is_set():
                        break
                    continue
                try:
                    handler(data, addr)
                except Exception:
                    logger.exception("datagram handler failed")

        self._thread = threading.Thread(target=loop, name=f"udp-{self.address[1]}", daemon=True)
        self._thread.start()

    def close(self, timeout: float = 2.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self.sock.close()
