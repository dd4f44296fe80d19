"""Latency benchmarks (``griddisc-bench``).

``retrieval`` times ``discovery.find`` against registries of growing size, once
per backend. ``replication`` times how long a registration at one node takes
to become visible at a second node, optionally through a lossy, delaying UDP
proxy. Both write per-sample CSV followed by a ``#``-prefixed summary block.

Nodes run in-process but are only ever touched through RPC and UDP.
"""

from __future__ import annotations

import argparse
import csv
import heapq
import io
import logging
import math
import random
import shutil
import socket
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Optional, Sequence, TextIO

from griddisc.node import Node, NodeConfig
from griddisc.replication import Address, PeerMode, PeerSet
from griddisc.rpc import RpcClient
from griddisc.storage import BackendDescriptor, BackendKind

logger = logging.getLogger(__name__)

CSV_HEADER = ["experiment", "x", "trial", "latency_micros", "timestamp_micros"]
SUMMARY_HEADER = ["x", "min", "mean", "p50", "p95", "max", "lost"]
DEFAULT_COUNTS = (100, 500, 1000, 2000, 5000)
LOOPBACK = "127.0.0.1"


class EmptyInput(ValueError):
    pass


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Impairment:
    loss_fraction: float = 0.0
    added_delay_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.loss_fraction < 1.0:
            raise ValueError("loss_fraction must be in [0, 1)")
        if self.added_delay_ms < 0:
            raise ValueError("added_delay_ms must be non-negative")


@dataclass(frozen=True)
class BenchSpec:
    experiment: str = "retrieval"
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    service_counts: tuple[int, ...] = DEFAULT_COUNTS
    trials_per_point: int = 20
    attempts: int = 50
    poll_interval_ms: float = 5
    impairment: Optional[Impairment] = None
    visibility_timeout_s: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.experiment not in ("retrieval", "replication"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        counts = list(self.service_counts)
        if any(n < 0 for n in counts) or counts != sorted(set(counts)):
            raise ValueError("service counts must be non-negative and strictly ascending")
        if self.trials_per_point < 1 or self.attempts < 1:
            raise ValueError("trials and attempts must be at least 1")


@dataclass(frozen=True)
class LatencySample:
    experiment: str
    x: int
    trial: int
    latency_micros: int
    timestamp_micros: int


@dataclass(frozen=True)
class Summary:
    x: Hashable
    min: Optional[int]
    mean: Optional[float]
    p50: Optional[int]
    p95: Optional[int]
    max: Optional[int]
    lost: int = 0


@dataclass
class BenchResult:
    experiment: str
    samples: list[LatencySample]
    summaries: dict
    lost: int = 0

    def write_csv(self, out: TextIO) -> None:
        write_csv(out, self.samples, self.summaries.values())


def nearest_rank(ordered: Sequence[int], pct: float) -> int:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]


def summarize(
    samples: Iterable[LatencySample],
    lost: Optional[Mapping[Hashable, int]] = None,
    group: Callable[[LatencySample], Hashable] = lambda s: s.x,
) -> dict[Hashable, Summary]:
    """Exact order statistics per group (per x by default).

    A group that lost every attempt gets empty stats; a call with neither
    samples nor losses raises EmptyInput.
    """
    lost = dict(lost or {})
    groups: dict[Hashable, list[int]] = {}
    for s in samples:
        groups.setdefault(group(s), []).append(s.latency_micros)
    for key in lost:
        groups.setdefault(key, [])
    if not groups:
        raise EmptyInput("no samples to summarize")
    out = {}
    for key in sorted(groups):
        values = sorted(groups[key])
        if not values:
            if not lost.get(key):
                raise EmptyInput(f"no samples for x={key}")
            out[key] = Summary(key, None, None, None, None, None, lost[key])
            continue
        out[key] = Summary(
            key,
            values[0],
            sum(values) / len(values),
            nearest_rank(values, 50),
            nearest_rank(values, 95),
            values[-1],
            lost.get(key, 0),
        )
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.1f}"
    return str(value)


def write_csv(out: TextIO, samples: Iterable[LatencySample], summaries: Iterable[Summary]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in samples:
        writer.writerow([s.experiment, s.x, s.trial, s.latency_micros, s.timestamp_micros])
    out.write("# summary\n")
    out.write("# " + ",".join(SUMMARY_HEADER) + "\n")
    for sm in summaries:
        out.write("# " + ",".join(_fmt(v) for v in (sm.x, sm.min, sm.mean, sm.p50, sm.p95, sm.max, sm.lost)) + "\n")


def read_csv(text: str) -> tuple[list[LatencySample], list[dict]]:
    """Parse a bench CSV back into samples and summary rows (dicts of strings)."""
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    trailer = [line[2:] for line in text.splitlines() if line.startswith("# ")]
    rows = list(csv.reader(body))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("missing CSV header")
    samples = [LatencySample(r[0], int(r[1]), int(r[2]), int(r[3]), int(r[4])) for r in rows[1:]]
    summary_rows = list(csv.reader(trailer))
    if summary_rows and summary_rows[0] == ["summary"]:
        summary_rows = summary_rows[1:]
    if summary_rows and summary_rows[0] == SUMMARY_HEADER:
        summary_rows = summary_rows[1:]
    return samples, [dict(zip(SUMMARY_HEADER, r)) for r in summary_rows]


# -- impairment proxy ------------------------------------------------------------


class ImpairmentProxy:
    """Forwards UDP datagrams to ``target``, dropping with probability ``loss``
    and holding each survivor for ``delay_ms`` before sending it on."""

    def __init__(self, target: Address, loss: float = 0.0, delay_ms: float = 0.0, seed: int = 0, bind: Address = (LOOPBACK, 0)):
        self.target = target
        self.loss = loss
        self.delay = delay_ms / 1000
        self.rng = random.Random(seed)
        self.forwarded = 0
        self.dropped = 0
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.settimeout(0.05)
        self._queue: list[tuple[float, int, bytes]] = []
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._counter = 0
        self._threads = [
            threading.Thread(target=self._receive, name="proxy-recv", daemon=True),
            threading.Thread(target=self._deliver, name="proxy-send", daemon=True),
        ]

    @property
    def address(self) -> Address:
        return self.sock.getsockname()

    def start(self) -> "ImpairmentProxy":
        for t in self._threads:
            t.start()
        return self

    def _receive(self):
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            if self.rng.random() < self.loss:
                self.dropped += 1
                continue
            with self._cond:
                self._counter += 1
                heapq.heappush(self._queue, (time.monotonic() + self.delay, self._counter, data))
                self._cond.notify()

    def _deliver(self):
        while True:
            with self._cond:
                while not self._stop.is_set():
                    if self._queue:
                        wait = self._queue[0][0] - time.monotonic()
                        if wait <= 0:
                            break
                        self._cond.wait(wait)
                    else:
                        self._cond.wait(0.1)
                if self._stop.is_set():
                    return
                _, _, data = heapq.heappop(self._queue)
            try:
                self.sock.sendto(data, self.target)
                self.forwarded += 1
            except OSError as exc:
                logger.warning("proxy send failed: %s", exc)

    def close(self):
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        for t in self._threads:
            if t.is_alive():
                t.join(2)
        self.sock.close()


# -- experiments -----------------------------------------------------------------


def _bench_node(backend: BackendDescriptor, peers: Optional[PeerSet] = None) -> Node:
    config = NodeConfig(
        http_bind=(LOOPBACK, 0),
        udp_bind=(LOOPBACK, 0),
        peers=peers,
        backend=backend,
        # keep the sweeper out of the timings
        sweep_interval_ms=600_000,
        repush_secs=None,
    )
    return Node(config).start()


def _fresh_backend(template: BackendDescriptor, scratch: Path) -> BackendDescriptor:
    if template.kind is BackendKind.PERSISTENT:
        return replace(template, location=tempfile.mkdtemp(prefix="store-", dir=scratch))
    return template


def _now_us() -> int:
    return time.time_ns() // 1000


def run_retrieval_bench(spec: BenchSpec, progress: Optional[Callable[[str], None]] = None) -> BenchResult:
    """Time empty-filter finds over a warm connection for each service count."""
    label = f"retrieval-{spec.backend.kind.value}"
    samples: list[LatencySample] = []
    base = Path(spec.backend.location) if spec.backend.location else None
    if base is not None:
        base.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix="griddisc-bench-", dir=base))
    try:
        for n in spec.service_counts:
            try:
                node = _bench_node(_fresh_backend(spec.backend, scratch))
            except Exception as exc:
                raise BenchError(f"node start failed for n={n}: {exc}") from exc
            client = RpcClient(node.http_address, timeout=60)
            try:
                for i in range(n):
                    client.register(f"svc-{i}", f"http://bench-{i % 16}:8080", ["get", "put"], {"tier": "bench"}, lease_secs=86400)
                client.connect()
                warm = client.call_raw("discovery.find", {})
                if not warm.ok or len(warm.result) != n:
                    raise BenchError(f"warm-up find at n={n} returned {warm.error or len(warm.result)}")
                for trial in range(spec.trials_per_point):
                    response = client.call_raw("discovery.find", {})
                    if not response.ok:
                        raise BenchError(f"find failed at n={n}: {response.error}")
                    if len(response.result) != n:
                        raise BenchError(f"find at n={n} returned {len(response.result)} records")
                    samples.append(LatencySample(label, n, trial, response.latency_micros, _now_us()))
            finally:
                client.close()
                node.stop()
            if progress:
                mean = sum(s.latency_micros for s in samples if s.x == n) / spec.trials_per_point
                progress(f"{label} n={n}: mean {mean:.0f} us")
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return BenchResult(label, samples, summarize(samples))


def run_replication_bench(spec: BenchSpec, progress: Optional[Callable[[str], None]] = None) -> BenchResult:
    """Register at node A, poll node B until the record shows up."""
    label = "replication"
    samples: list[LatencySample] = []
    lost = 0
    receiver = _bench_node(BackendDescriptor())
    proxy = None
    sender = None
    try:
        target = receiver.udp_address
        if spec.impairment is not None:
            proxy = ImpairmentProxy(target, spec.impairment.loss_fraction, spec.impairment.added_delay_ms, spec.seed).start()
            target = proxy.address
        sender = _bench_node(BackendDescriptor(), PeerSet(PeerMode.MESH, (target,)))
        at_a = RpcClient(sender.http_address)
        at_b = RpcClient(receiver.http_address)
        at_a.connect()
        at_b.connect()
        poll = spec.poll_interval_ms / 1000
        for attempt in range(spec.attempts):
            token = uuid.uuid4().hex
            stamp = _now_us()
            t0 = time.perf_counter_ns()
            at_a.register(f"repl-{attempt}", "http://bench-a:8080", ["get"], {"bench-token": token}, lease_secs=3600)
            deadline = t0 + int(spec.visibility_timeout_s * 1e9)
            while True:
                found = at_b.call("discovery.find_key", {"key": "bench-token", "value": token})
                t1 = time.perf_counter_ns()
                if found:
                    samples.append(LatencySample(label, attempt, 0, (t1 - t0) // 1000, stamp))
                    break
                if t1 >= deadline:
                    lost += 1
                    logger.info("attempt %d not visible after %.1f s, counted as lost", attempt, spec.visibility_timeout_s)
                    break
                time.sleep(poll)
        at_a.close()
        at_b.close()
    finally:
        if sender is not None:
            sender.stop()
        if proxy is not None:
            proxy.close()
        receiver.stop()
    summaries = summarize(samples, {"all": lost} if lost else None, group=lambda s: "all")
    if progress:
        s = summaries["all"]
        progress(f"replication: {len(samples)} visible, {lost} lost, min {s.min} mean {_fmt(s.mean)} p95 {s.p95} max {s.max} us")
    return BenchResult(label, samples, summaries, lost)


def run_bench(spec: BenchSpec, progress=None) -> BenchResult:
    if spec.experiment == "retrieval":
        return run_retrieval_bench(spec, progress)
    return run_replication_bench(spec, progress)


def _counts(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="griddisc-bench", description="Discovery latency benchmarks.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="experiment", required=True)

    ret = sub.add_parser("retrieval", help="find latency against registry size")
    ret.add_argument("--backend", choices=["memory", "persistent"], default="memory")
    ret.add_argument("--data-dir", help="scratch directory for the persistent backend")
    ret.add_argument("--counts", type=_counts, default=DEFAULT_COUNTS)
    ret.add_argument("--trials", type=int, default=20)
    ret.add_argument("--out", required=True)

    rep = sub.add_parser("replication", help="time until a registration is visible at a peer")
    rep.add_argument("--attempts", type=int, default=50)
    rep.add_argument("--loss", type=float, default=0.0)
    rep.add_argument("--delay-ms", type=float, default=0.0)
    rep.add_argument("--poll-interval-ms", type=float, default=5)
    rep.add_argument("--timeout-s", type=float, default=10.0)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.experiment == "retrieval":
        spec = BenchSpec(
            "retrieval",
            backend=BackendDescriptor(BackendKind(args.backend), args.data_dir or tempfile.gettempdir()),
            service_counts=args.counts,
            trials_per_point=args.trials,
        )
    else:
        impairment = Impairment(args.loss, args.delay_ms) if (args.loss or args.delay_ms) else None
        spec = BenchSpec(
            "replication",
            attempts=args.attempts,
            poll_interval_ms=args.poll_interval_ms,
            impairment=impairment,
            visibility_timeout_s=args.timeout_s,
            seed=args.seed,
        )
    try:
        result = run_bench(spec, progress=lambda line: print(line, file=sys.stderr))
    except BenchError as exc:
        print(f"griddisc-bench: {exc}", file=sys.stderr)
        return 1
    buf = io.StringIO()
    result.write_csv(buf)
    Path(args.out).write_text(buf.getvalue())
    return 0


if __name__ == "__main__":
    sys.exit(main())
