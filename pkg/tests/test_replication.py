import random
import socket
import time

from griddisc.model import Lease, QueryFilter, ServiceRecord, VersionStamp, now_micros
from griddisc.registry import Registry
from griddisc.replication import (
    ApplyResult,
    DedupWindow,
    KnownNodes,
    PeerMode,
    PeerSet,
    Replicator,
    UdpTransport,
    apply_remote,
    hub_fanout,
)
from griddisc.storage import MemoryStore
from griddisc.wire import Datagram, DeletePayload, Op, decode_datagram, encode_datagram, encode_record

from conftest import T0, node_id, persistent, seeded_ids

EMPTY = QueryFilter()
P1, P2, P3 = ("127.0.0.1", 7001), ("127.0.0.1", 7002), ("127.0.0.1", 7003)


class Capture:
    def __init__(self):
        self.sent = []

    def __call__(self, data, addr):
        self.sent.append((decode_datagram(data), addr))


def new_registry(n=0, seed=None):
    return Registry(MemoryStore(), node_id(n), id_factory=seeded_ids(n if seed is None else seed))


def wired(n=0, peers=None, role="node", send=None):
    reg = new_registry(n)
    rep = Replicator(reg, send or Capture(), peers, role, clock=lambda: T0)
    reg.add_listener(rep.publish)
    return reg, rep


def test_mesh_publishes_once_per_peer_with_one_sequence():
    reg, rep = wired(peers=PeerSet(PeerMode.MESH, (P1, P2, P3)))
    reg.register("calc", "http://a", [], {}, lease_secs=60, now=T0)
    sent = rep.send.sent
    assert [addr for _, addr in sent] == [P1, P2, P3]
    assert {d.sequence for d, _ in sent} == {1}
    assert all(d.op is Op.UPSERT for d, _ in sent)


def test_hub_mode_sends_to_hub_only():
    reg, rep = wired(peers=PeerSet(PeerMode.HUB, (P1,)))
    reg.register("calc", "http://a", [], {}, lease_secs=60, now=T0)
    assert [addr for _, addr in rep.send.sent] == [P1]


def test_deregister_and_renew_publish():
    reg, rep = wired(peers=PeerSet(PeerMode.MESH, (P1,)))
    r = reg.register("calc", "http://a", [], {}, lease_secs=60, now=T0)
    reg.renew(r.service_id, 60, T0 + 1)
    reg.deregister(r.service_id, T0 + 2)
    ops = [(d.op, d.sequence) for d, _ in rep.send.sent]
    assert ops == [(Op.UPSERT, 1), (Op.UPSERT, 2), (Op.DELETE, 3)]
    last = rep.send.sent[-1][0].payload
    assert last == DeletePayload(r.service_id, reg.get(r.service_id).stamp)


def test_no_peers_means_no_publishing():
    reg, rep = wired()
    reg.register("calc", "http://a", [], {}, lease_secs=60, now=T0)
    assert rep.send.sent == [] and not rep.enabled


def test_hundred_mutations_arrive_with_sequences_one_to_hundred():
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    sink.settimeout(2)
    transport = UdpTransport(("127.0.0.1", 0))
    try:
        reg = new_registry()
        rep = Replicator(reg, transport.send, PeerSet(PeerMode.MESH, (sink.getsockname(),)))
        reg.add_listener(rep.publish)
        for i in range(100):
            reg.register(f"s{i}", "http://a", [], {}, lease_secs=60, now=T0 + i)
        seqs = [decode_datagram(sink.recvfrom(9000)[0]).sequence for _ in range(100)]
    finally:
        transport.close()
        sink.close()
    assert sorted(seqs) == list(range(1, 101))


def test_failed_sends_leave_local_state_unchanged():
    def broken(data, addr):
        raise OSError("network unreachable")

    ok_reg, _ = wired(peers=PeerSet(PeerMode.MESH, (P1, P2)))
    bad_reg, bad_rep = wired(peers=PeerSet(PeerMode.MESH, (P1, P2)), send=broken)
    for reg in (ok_reg, bad_reg):
        r = reg.register("calc", "http://a", [], {}, lease_secs=60, now=T0)
        reg.renew(r.service_id, 30, T0 + 5)
        reg.deregister(r.service_id, T0 + 6)
        reg.register("stat", "http://a", [], {}, lease_secs=60, now=T0 + 7)
    assert [encode_record(r) for r in ok_reg.records()] == [encode_record(r) for r in bad_reg.records()]
    assert bad_rep.publish(bad_reg.records()[0]) == 0


# -- apply_remote --------------------------------------------------------------------


def remote_record(i, wall, origin=7, tomb=False):
    r = ServiceRecord(
        f"00000000-0000-4000-8000-{i:012d}", f"svc{i}", "http://r", ("m",), (("k", str(wall)),), Lease.grant(T0, 3600), VersionStamp(wall, node_id(origin))
    )
    return r.as_tombstone(r.stamp) if tomb else r


def upsert(record, seq, origin=7):
    return Datagram(Op.UPSERT, node_id(origin), seq, record)


def test_apply_unknown_upsert():
    reg = new_registry()
    r = remote_record(1, T0)
    assert apply_remote(upsert(r, 1), reg, DedupWindow()) is ApplyResult.APPLIED
    assert reg.find(EMPTY, T0) == [r]


def test_apply_twice_is_duplicate():
    reg = new_registry()
    dedup = DedupWindow()
    d = upsert(remote_record(1, T0), 1)
    assert apply_remote(d, reg, dedup) is ApplyResult.APPLIED
    before = reg.records()
    assert apply_remote(d, reg, dedup) is ApplyResult.DUPLICATE
    assert reg.records() == before


def test_older_stamp_is_stale():
    reg = new_registry()
    dedup = DedupWindow()
    assert apply_remote(upsert(remote_record(1, 5), 1), reg, dedup) is ApplyResult.APPLIED
    assert apply_remote(upsert(remote_record(1, 3), 2), reg, dedup) is ApplyResult.STALE
    assert reg.get(remote_record(1, 0).service_id).stamp.wall_micros == 5


def test_delete_blocks_late_upsert():
    reg = new_registry()
    dedup = DedupWindow()
    sid = remote_record(1, 0).service_id
    d = Datagram(Op.DELETE, node_id(7), 1, DeletePayload(sid, VersionStamp(10, node_id(7))))
    assert apply_remote(d, reg, dedup) is ApplyResult.APPLIED
    assert apply_remote(upsert(remote_record(1, 9), 2), reg, dedup) is ApplyResult.STALE
    assert reg.get(sid).tombstone
    assert apply_remote(upsert(remote_record(1, 11), 3), reg, dedup) is ApplyResult.APPLIED
    assert not reg.get(sid).tombstone


def test_heartbeat_touches_no_state():
    reg = new_registry()
    assert apply_remote(Datagram(Op.HEARTBEAT, node_id(7), 0), reg) is ApplyResult.APPLIED
    assert reg.records() == []


def test_dedup_window_forgets_oldest():
    w = DedupWindow(size=3)
    origin = node_id(1)
    assert [w.check_and_add(origin, s) for s in (1, 2, 3, 1)] == [False, False, False, True]
    w.check_and_add(origin, 4)  # evicts 1
    assert w.check_and_add(origin, 1) is False
    assert w.check_and_add(node_id(2), 2) is False


def random_mutations(rng, count=200, ids=3, origins=3):
    out, used = [], set()
    while len(out) < count:
        seq = len(out)
        origin = rng.randrange(origins)
        wall = T0 + rng.randrange(50)  # plenty of clock ties across origins
        i = rng.randrange(ids)
        # one stamp names one mutation, as with real per-node stamps
        if (i, wall, origin) in used:
            continue
        used.add((i, wall, origin))
        if rng.random() < 0.3:
            sid = remote_record(i, 0).service_id
            out.append(Datagram(Op.DELETE, node_id(origin), seq, DeletePayload(sid, VersionStamp(wall, node_id(origin)))))
        else:
            out.append(upsert(remote_record(i, wall, origin, tomb=rng.random() < 0.1), seq, origin))
    return out


def max_stamp_oracle(datagrams):
    """service_id -> (stamp, live record or None), by brute force over all mutations."""
    best = {}
    for d in datagrams:
        if d.op is Op.UPSERT:
            key, stamp, value = d.payload.service_id, d.payload.stamp, None if d.payload.tombstone else d.payload
        else:
            key, stamp, value = d.payload.service_id, d.payload.stamp, None
        if key not in best or stamp > best[key][0]:
            best[key] = (stamp, value)
    return best


def test_any_permutation_converges_to_max_stamp_state():
    rng = random.Random(42)
    mutations = random_mutations(rng)
    oracle = max_stamp_oracle(mutations)
    expected_live = sorted((v for _, v in oracle.values() if v is not None), key=lambda r: (r.name, r.service_id))
    for _ in range(25):
        order = mutations[:]
        rng.shuffle(order)
        reg = new_registry()
        dedup = DedupWindow()
        for d in order:
            apply_remote(d, reg, dedup)
        assert reg.find(EMPTY, T0) == expected_live
        assert {r.service_id: r.stamp for r in reg.records()} == {k: s for k, (s, _) in oracle.items()}


# -- startup sync and hub fanout -------------------------------------------------------


def test_startup_sync_empty():
    _, mesh = wired(peers=PeerSet(PeerMode.MESH, (P1,)))
    assert mesh.startup_sync() == 0
    _, hub_mode = wired(peers=PeerSet(PeerMode.HUB, (P1,)))
    assert hub_mode.startup_sync() == 1
    assert [d.op for d, _ in hub_mode.send.sent] == [Op.HEARTBEAT]


def test_startup_sync_pushes_only_live_records():
    reg, rep = wired(peers=PeerSet(PeerMode.HUB, (P1,)))
    made = [reg.register(f"s{i}", "http://a", [], {}, lease_secs=60, now=T0) for i in range(7)]
    for r in made[:2]:
        reg.deregister(r.service_id, T0)
    rep.send.sent.clear()
    assert rep.startup_sync() == 6
    ops = [d.op for d, _ in rep.send.sent]
    assert ops == [Op.HEARTBEAT] + [Op.UPSERT] * 5
    assert {d.payload.service_id for d, _ in rep.send.sent[1:]} == {r.service_id for r in made[2:]}


class FakeMonotonic:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_hub_fanout_skips_origin():
    known = KnownNodes()
    for n, addr in enumerate((P1, P2, P3)):
        known.learn(node_id(n), addr)
    cap = Capture()
    d = Datagram(Op.HEARTBEAT, node_id(0), 1)
    assert hub_fanout(encode_datagram(d), d, known, cap, P1) == 2
    assert sorted(addr for _, addr in cap.sent) == [P2, P3]


def test_hub_learns_unknown_origin_and_forwards():
    hub_reg, hub = wired(9, role="hub")
    hub.known.learn(node_id(1), P1)
    hub.known.learn(node_id(2), P2)
    d = upsert(remote_record(1, T0, origin=3), 1, origin=3)
    assert hub.receive(encode_datagram(d), P3) is ApplyResult.APPLIED
    assert node_id(3) in hub.known.nodes
    assert sorted(addr for _, addr in hub.send.sent) == [P1, P2]
    assert all(fwd == d for fwd, _ in hub.send.sent)
    # the hub keeps its own replica
    assert hub_reg.find(EMPTY, T0) == [d.payload]
    # a duplicate is not forwarded again
    hub.receive(encode_datagram(d), P3)
    assert len(hub.send.sent) == 2


def test_hub_drops_silent_nodes():
    clock = FakeMonotonic()
    known = KnownNodes(timeout=90, clock=clock)
    known.learn(node_id(1), P1)
    clock.t = 60
    known.learn(node_id(2), P2)
    clock.t = 91
    assert known.targets() == [P2]
    assert node_id(1) not in known.nodes


def test_hub_publishes_local_mutations_to_known_nodes():
    reg, hub = wired(9, role="hub")
    hub.known.learn(node_id(1), P1)
    hub.known.learn(node_id(2), P2)
    reg.register("calc", "http://hub", [], {}, lease_secs=60, now=T0)
    assert sorted(addr for _, addr in hub.send.sent) == [P1, P2]


def test_receive_drops_garbage():
    reg, rep = wired()
    rng = random.Random(0)
    for _ in range(200):
        assert rep.receive(rng.randbytes(rng.randint(0, 100)), P1) is None
    assert rep.decode_errors == 200
    assert reg.records() == []


# -- real sockets ------------------------------------------------------------------------


def live_bytes(reg, now):
    return [encode_record(r) for r in reg.find(EMPTY, now)]


def wait_until(pred, timeout=10.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()


def test_restarted_replicas_exchange_full_state():
    ta, tb = UdpTransport(("127.0.0.1", 0)), UdpTransport(("127.0.0.1", 0))
    try:
        ra, rb = new_registry(1), new_registry(2)
        for i in range(50):
            ra.register(f"a{i}", "http://a", [], {}, lease_secs=3600, now=T0)
            rb.register(f"b{i}", "http://b", [], {}, lease_secs=3600, now=T0)
        expected = sorted(r.service_id for r in ra.records() + rb.records())
        ta_rep = Replicator(ra, ta.send, PeerSet(PeerMode.MESH, (tb.address,)), clock=lambda: T0)
        tb_rep = Replicator(rb, tb.send, PeerSet(PeerMode.MESH, (ta.address,)), clock=lambda: T0)
        ta.start(ta_rep.receive)
        tb.start(tb_rep.receive)
        assert ta_rep.startup_sync() == 50
        # b may already hold some of a's records by now
        assert tb_rep.startup_sync() >= 50
        assert wait_until(lambda: len(ra.records()) == len(rb.records()) == 100)
        assert sorted(r.service_id for r in ra.find(EMPTY, T0)) == expected
        assert live_bytes(ra, T0) == live_bytes(rb, T0)
    finally:
        ta.close()
        tb.close()


def test_hub_cluster_converges(make_node):
    hub = make_node(role="hub")
    nodes = [make_node(peers=PeerSet(PeerMode.HUB, (hub.udp_address,))) for _ in range(3)]
    everyone = [hub] + nodes
    assert wait_until(lambda: len(hub.replicator.known.nodes) == 3)
    rng = random.Random(9)
    for step in range(300):
        node = rng.choice(everyone)
        now = now_micros()
        live = node.registry.find(EMPTY, now)
        roll = rng.random()
        if live and roll < 0.25:
            node.registry.renew(rng.choice(live).service_id, 3600, now)
        elif live and roll < 0.45:
            node.registry.deregister(rng.choice(live).service_id, now)
        else:
            node.registry.register(f"svc{step}", f"http://n{step % 5}", ["m"], {"k": str(step)}, lease_secs=3600, now=now)
        if step % 20 == 0:
            time.sleep(0.005)
    now = now_micros()

    def converged():
        views = [live_bytes(n.registry, now) for n in everyone]
        return all(v == views[0] for v in views)

    assert wait_until(converged)
    assert len(live_bytes(hub.registry, now)) > 50


def test_restarted_nodes_converge_with_repush(make_node, tmp_path):
    def free_port():
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.bind(("127.0.0.1", 0))
            return s.getsockname()[1]

    pa, pb = free_port(), free_port()
    for name, port in (("a", pa), ("b", pb)):
        node = make_node(backend=persistent(tmp_path / name), udp_bind=("127.0.0.1", port))
        for i in range(50):
            node.registry.register(f"{name}{i}", f"http://{name}", [], {}, lease_secs=3600, now=now_micros())
        node.stop()
    a = make_node(backend=persistent(tmp_path / "a"), udp_bind=("127.0.0.1", pa), peers=PeerSet(PeerMode.MESH, (("127.0.0.1", pb),)), repush_secs=1)
    b = make_node(backend=persistent(tmp_path / "b"), udp_bind=("127.0.0.1", pb), peers=PeerSet(PeerMode.MESH, (("127.0.0.1", pa),)), repush_secs=1)
    now = now_micros()
    assert wait_until(lambda: len(a.registry.find(EMPTY, now)) == len(b.registry.find(EMPTY, now)) == 100, timeout=5)
    assert live_bytes(a.registry, now) == live_bytes(b.registry, now)
