import math
import random

import pytest
from hypothesis import given, strategies as st

from homewsn.medium import (
    ADDRESS_SPACE, COORDINATOR, FRAME_OVERHEAD, MESH, TREE, AddressAllocator, AddressSpaceExhausted,
    Frame, FrameError, LinkModel, Medium, NoRoute, OutOfRange, Position, Topology, checksum, join,
    random_topology, route,
)


def line_topology(n=5, spacing=50.0, mode=TREE):
    topo = Topology(LinkModel(), mode)
    for i in range(1, n):
        topo.join(Position(i * spacing, 0.0))
    return topo


def floyd_warshall_hops(topo):
    """Independent all-pairs hop counts over the range graph (all nodes relay)."""
    addrs = sorted(topo.nodes)
    idx = {a: i for i, a in enumerate(addrs)}
    n = len(addrs)
    d = [[math.inf] * n for _ in range(n)]
    for a in addrs:
        d[idx[a]][idx[a]] = 0
        for b in addrs:
            if a != b and math.dist((topo.nodes[a].x, topo.nodes[a].y),
                                    (topo.nodes[b].x, topo.nodes[b].y)) <= topo.link.max_range:
                d[idx[a]][idx[b]] = 1
    for k in range(n):
        dk = d[k]
        for i in range(n):
            dik = d[i][k]
            if dik == math.inf:
                continue
            row = d[i]
            for j in range(n):
                if dik + dk[j] < row[j]:
                    row[j] = dik + dk[j]
    return {(a, b): d[idx[a]][idx[b]] for a in addrs for b in addrs}


# -- addressing ---------------------------------------------------------------

def test_first_allocation_is_one():
    assert AddressAllocator().allocate() == 1


def test_allocation_exhausts_at_16_bits():
    alloc = AddressAllocator()
    got = [alloc.allocate() for _ in range(ADDRESS_SPACE - 1)]
    assert len(set(got)) == ADDRESS_SPACE - 1
    assert COORDINATOR not in got
    with pytest.raises(AddressSpaceExhausted):
        alloc.allocate()


@given(st.lists(st.tuples(st.floats(-70, 70), st.floats(-70, 70)), max_size=40))
def test_join_addresses_pairwise_distinct(points):
    topo = Topology()
    for x, y in points:
        topo.join(Position(x, y))
    addrs = list(topo.nodes)
    assert len(addrs) == len(set(addrs)) == len(points) + 1


# -- join ---------------------------------------------------------------------

def test_join_single_candidate():
    topo = Topology()
    a = join(topo, Position(10, 0))
    assert topo.parent[a] == 0


def test_join_out_of_range():
    with pytest.raises(OutOfRange):
        Topology().join(Position(150, 0))


def test_join_prefers_nearest_router():
    topo = Topology()
    r = topo.join(Position(80, 0))
    a = topo.join(Position(90, 0))
    assert topo.parent[a] == r


def test_end_devices_do_not_parent():
    topo = Topology()
    ed = topo.join(Position(80, 0), router=False)
    a = topo.join(Position(90, 0))
    assert topo.parent[a] == 0 != ed


@given(st.integers(0, 2**32), st.integers(2, 40))
def test_tree_invariants(seed, n):
    topo = random_topology(n, random.Random(seed), routing_mode=TREE)
    for child, parent in topo.parent.items():
        assert topo.distance(child, parent) <= topo.link.max_range
        path = topo.path_to_root(child)
        assert path[-1] == COORDINATOR
        assert len(path) == len(set(path))


# -- routing ------------------------------------------------------------------

def test_route_line():
    topo = line_topology()
    assert route(topo, 4, 0) == [4, 3, 2, 1, 0]


@pytest.mark.parametrize("mode", [TREE, MESH])
def test_route_identity(mode):
    topo = line_topology(mode=mode)
    assert route(topo, 3, 3) == [3]


def test_tree_route_between_branches():
    topo = Topology()
    a = topo.join(Position(50, 0))
    b = topo.join(Position(-50, 0))
    a2 = topo.join(Position(100, 0))
    assert route(topo, a2, b) == [a2, a, 0, b]


def test_tree_route_link_down():
    topo = line_topology()
    topo.set_link_down(2, 3)
    with pytest.raises(NoRoute):
        route(topo, 4, 0)


def test_mesh_route_disconnected():
    topo = line_topology(spacing=60.0, mode=MESH)
    topo.set_link_down(1, 2)
    with pytest.raises(NoRoute):
        route(topo, 4, 0)


def test_mesh_route_detours_around_down_link():
    topo = Topology(routing_mode=MESH)
    a = topo.join(Position(60, 0))
    b = topo.join(Position(60, 60))
    c = topo.join(Position(120, 30))
    topo.set_link_down(a, c)
    path = route(topo, c, 0)
    assert path == [c, b, 0]


def test_mesh_matches_bfs_oracle_12_nodes():
    rng = random.Random(12)
    topo = random_topology(12, rng, routing_mode=MESH)
    oracle = floyd_warshall_hops(topo)
    for a in topo.nodes:
        for b in topo.nodes:
            assert len(route(topo, a, b)) - 1 == oracle[a, b]


@given(st.integers(0, 2**32), st.integers(2, 50))
def test_mesh_optimal_and_loop_free(seed, n):
    topo = random_topology(n, random.Random(seed), routing_mode=MESH)
    oracle = floyd_warshall_hops(topo)
    for a in topo.nodes:
        path = route(topo, a, COORDINATOR)
        assert len(path) == len(set(path))
        assert len(path) - 1 == oracle[a, COORDINATOR]


# -- frames -------------------------------------------------------------------

def test_checksum_xbee_style():
    # 0xFF - (0x7D + 0x33 + 0x01) & 0xFF = 0xFF - 0xB1
    assert checksum(bytes([0x7D, 0x33, 0x01])) == 0x4E
    assert checksum(b"") == 0xFF


def test_frame_rejects_oversize_and_bad_checksum():
    with pytest.raises(FrameError):
        Frame.build(1, 0, 0, b"x" * 85)
    Frame.build(1, 0, 0, b"x" * 84)
    with pytest.raises(FrameError):
        Frame(1, 0, 0, b"abc", checksum=0)


@given(st.integers(0, 0xFFFF), st.integers(0, 0xFFFF), st.integers(0, 255), st.binary(max_size=84), st.booleans())
def test_frame_wire_roundtrip(src, dst, seq, payload, enc):
    f = Frame.build(src, dst, seq, payload, encrypted=enc)
    raw = f.to_bytes()
    assert len(raw) == len(payload) + FRAME_OVERHEAD
    assert Frame.from_bytes(raw) == f


def test_frame_from_bytes_detects_corruption():
    raw = bytearray(Frame.build(1, 0, 7, b"R:kitchen;gas=1\n").to_bytes())
    raw[12] ^= 0x01
    with pytest.raises(FrameError):
        Frame.from_bytes(bytes(raw))


# -- transmit -----------------------------------------------------------------

def one_hop(distance=30.0, **link):
    topo = Topology(LinkModel(**link))
    a = topo.join(Position(distance, 0))
    return topo, a


def test_single_hop_delay_band():
    topo, a = one_hop(interference_loss=0.0)
    med = Medium(topo, seed=1)
    for i in range(200):
        out = med.transmit(Frame.build(a, 0, i % 256, b"hello"), now=i * 1000.0)
        assert out.delivered
        assert 15.0 <= out.delay <= 100.0
        assert 15.0 <= out.latency_samples[0] <= 100.0


def test_out_of_range_hop_always_dropped():
    topo, a = one_hop(interference_loss=0.0)
    topo.nodes[a] = Position(101, 0)  # moved after joining
    med = Medium(topo, seed=0)
    outs = [med.transmit(Frame.build(a, 0, 0, b"x"), float(i)) for i in range(100)]
    assert all(not o.delivered and o.reason == "out_of_range" for o in outs)


def test_distance_loss_ramp():
    link = LinkModel()
    assert link.distance_loss(60) == 0.0
    assert link.distance_loss(80) == pytest.approx(0.5)
    assert link.distance_loss(100) == 1.0
    assert link.distance_loss(100.5) == 1.0


def test_ramp_drop_rate_statistics():
    topo, a = one_hop(distance=80.0, interference_loss=0.0)
    med = Medium(topo, seed=3)
    n = 4000
    delivered = sum(med.transmit(Frame.build(a, 0, 0, b"x"), i * 1000.0).delivered for i in range(n))
    # Binomial(4000, 0.5): sd ~ 32.
    assert abs(delivered - n / 2) < 5 * 32


def test_250k_bits_take_at_least_a_second():
    topo, a = one_hop(interference_loss=0.0)
    med = Medium(topo, seed=5)
    frame = Frame.build(a, 0, 0, b"x" * 115, max_payload=115)  # 125 bytes = 1000 bits on air
    assert frame.bits == 1000
    outs = [med.transmit(frame, 0.0) for _ in range(250)]
    assert all(o.delivered for o in outs)
    assert max(o.at for o in outs) >= 1000.0


def test_multihop_latency_growth():
    topo = Topology(LinkModel(interference_loss=0.0))
    for i in range(1, 4):
        topo.join(Position(i * 50.0, 0))
    med = Medium(topo, seed=9)
    out = med.transmit(Frame.build(3, 0, 0, b"x"), 0.0)
    assert out.delivered and out.hops == 3
    first, *rest = out.latency_samples
    assert 15 <= first <= 100 and all(5 <= s <= 30 for s in rest)


@given(st.integers(0, 2**32))
def test_transmit_deterministic(seed):
    def run():
        topo = line_topology(n=4, spacing=40.0)
        med = Medium(topo, seed=seed)
        return [med.transmit(Frame.build(3, 0, i, b"abc"), i * 7.0) for i in range(30)]
    assert run() == run()


def test_link_model_validation():
    with pytest.raises(ValueError):
        LinkModel(reliable_range=120)
    with pytest.raises(ValueError):
        LinkModel(interference_loss=1.5)
    with pytest.raises(ValueError):
        LinkModel(latency_ms=(100, 15))
    with pytest.raises(ValueError):
        Position(math.nan, 0)
