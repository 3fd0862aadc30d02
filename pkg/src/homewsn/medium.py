"""Virtual 802.15.4 radio medium.

Node placement, 16-bit address allocation, cluster-tree / shortest-path
routing toward the coordinator, and per-hop frame delivery with distance
loss, interference loss, latency sampling and bit-rate serialization.
"""

from __future__ import annotations

import math
import random
import struct
from collections import deque
from dataclasses import dataclass, field

COORDINATOR = 0
ADDRESS_SPACE = 1 << 16
DEFAULT_MAX_PAYLOAD = 84

START_DELIMITER = 0x7E
# delimiter(1) length(2) src(2) dst(2) seq(1) flags(1) ... checksum(1)
FRAME_OVERHEAD = 10

# Extra per-hop latency beyond the first hop, ms.
EXTRA_HOP_LATENCY = (5.0, 30.0)

TREE = "tree"
MESH = "mesh_shortest_path"
ROUTING_MODES = (TREE, MESH)


class MediumError(Exception):
    pass


class AddressSpaceExhausted(MediumError):
    pass


class OutOfRange(MediumError):
    pass


class NoRoute(MediumError):
    pass


class FrameError(MediumError, ValueError):
    pass


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def distance(self, other: Position) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class LinkModel:
    max_range: float = 100.0
    reliable_range: float = 60.0
    latency_ms: tuple[float, float] = (15.0, 100.0)
    bit_rate_cap: float = 250_000.0
    interference_loss: float = 0.01
    max_payload: int = DEFAULT_MAX_PAYLOAD
    # Recorded only; no channel model.
    frequency_band: str = "2.4GHz"

    def __post_init__(self):
        if not 0 < self.reliable_range <= self.max_range:
            raise ValueError("need 0 < reliable_range <= max_range")
        if not 0.0 <= self.interference_loss <= 1.0:
            raise ValueError("interference_loss must be in [0, 1]")
        if self.bit_rate_cap <= 0:
            raise ValueError("bit_rate_cap must be positive")
        lo, hi = self.latency_ms
        if not 0 <= lo <= hi:
            raise ValueError("latency interval needs 0 <= lo <= hi")
        if not 1 <= self.max_payload <= 0xFFFF - FRAME_OVERHEAD:
            raise ValueError("max_payload out of range")

    def distance_loss(self, distance: float) -> float:
        """Drop probability from distance alone: 0 inside reliable range, linear to 1 at max range."""
        if distance > self.max_range:
            return 1.0
        if distance <= self.reliable_range:
            return 0.0
        if self.max_range == self.reliable_range:
            return 1.0
        return (distance - self.reliable_range) / (self.max_range - self.reliable_range)


def checksum(payload: bytes) -> int:
    """XBee API checksum: 0xFF minus the low byte of the byte sum."""
    return 0xFF - (sum(payload) & 0xFF)


@dataclass(frozen=True)
class Frame:
    src: int
    dst: int
    seq: int
    payload: bytes
    encrypted: bool = False
    checksum: int = -1

    def __post_init__(self):
        for name in ("src", "dst"):
            v = getattr(self, name)
            if not 0 <= v < ADDRESS_SPACE:
                raise FrameError(f"{name} address {v} outside 16-bit range")
        if not 0 <= self.seq <= 0xFF:
            raise FrameError(f"seq {self.seq} outside 8-bit range")
        object.__setattr__(self, "payload", bytes(self.payload))
        expected = checksum(self.payload)
        if self.checksum == -1:
            object.__setattr__(self, "checksum", expected)
        elif self.checksum != expected:
            raise FrameError(f"bad checksum 0x{self.checksum:02x}, expected 0x{expected:02x}")

    @classmethod
    def build(cls, src: int, dst: int, seq: int, payload: bytes, *,
              encrypted: bool = False, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Frame:
        if len(payload) > max_payload:
            raise FrameError(f"payload of {len(payload)} bytes exceeds max_payload {max_payload}")
        return cls(src, dst, seq, payload, encrypted)

    def to_bytes(self) -> bytes:
        body = struct.pack(">HHBB", self.src, self.dst, self.seq, int(self.encrypted)) + self.payload
        return struct.pack(">BH", START_DELIMITER, len(body)) + body + bytes([self.checksum])

    @classmethod
    def from_bytes(cls, data: bytes) -> Frame:
        if len(data) < FRAME_OVERHEAD or data[0] != START_DELIMITER:
            raise FrameError("not a frame")
        (length,) = struct.unpack(">H", data[1:3])
        if len(data) != 3 + length + 1:
            raise FrameError(f"length field {length} disagrees with {len(data)} bytes")
        src, dst, seq, flags = struct.unpack(">HHBB", data[3:9])
        return cls(src, dst, seq, data[9:-1], bool(flags & 1), data[-1])

    @property
    def bits(self) -> int:
        return 8 * (len(self.payload) + FRAME_OVERHEAD)


class AddressAllocator:
    """Hands out unique 16-bit network addresses; 0 is reserved for the coordinator."""

    def __init__(self):
        self._used = {COORDINATOR}
        self._next = 1

    def __len__(self):
        return len(self._used)

    def __contains__(self, addr):
        return addr in self._used

    def allocate(self) -> int:
        if len(self._used) >= ADDRESS_SPACE:
            raise AddressSpaceExhausted("all 65,536 network addresses are in use")
        while self._next in self._used:
            self._next = (self._next + 1) % ADDRESS_SPACE
        addr = self._next
        self._used.add(addr)
        self._next = (addr + 1) % ADDRESS_SPACE
        return addr


def allocate_address(allocator: AddressAllocator) -> int:
    return allocator.allocate()


@dataclass
class Topology:
    link: LinkModel = field(default_factory=LinkModel)
    routing_mode: str = TREE
    coordinator_position: Position = field(default_factory=lambda: Position(0.0, 0.0))
    nodes: dict[int, Position] = field(init=False)
    parent: dict[int, int] = field(init=False)
    routers: set[int] = field(init=False)
    down_links: set[frozenset] = field(init=False)

    def __post_init__(self):
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.routing_mode!r}")
        self.nodes = {COORDINATOR: self.coordinator_position}
        self.parent = {}
        self.routers = {COORDINATOR}
        self.down_links = set()
        self.allocator = AddressAllocator()
        self._adjacency: dict[int, list[int]] | None = None

    def join(self, position: Position, *, router: bool = True) -> int:
        """Add a node under the nearest in-range routing-capable node."""
        best = None
        for addr in sorted(self.routers):
            d = self.nodes[addr].distance(position)
            if d <= self.link.max_range and (best is None or d < best[0]):
                best = (d, addr)
        if best is None:
            raise OutOfRange(f"no joined node within {self.link.max_range} m of ({position.x}, {position.y})")
        addr = self.allocator.allocate()
        self.nodes[addr] = position
        self.parent[addr] = best[1]
        if router:
            self.routers.add(addr)
        self._adjacency = None
        return addr

    def distance(self, a: int, b: int) -> float:
        return self.nodes[a].distance(self.nodes[b])

    def set_link_down(self, a: int, b: int, down: bool = True) -> None:
        key = frozenset((a, b))
        if down:
            self.down_links.add(key)
        else:
            self.down_links.discard(key)

    def link_up(self, a: int, b: int) -> bool:
        return frozenset((a, b)) not in self.down_links

    def neighbors(self, addr: int) -> list[int]:
        if self._adjacency is None:
            self._adjacency = self._build_adjacency()
        return self._adjacency[addr]

    def _build_adjacency(self) -> dict[int, list[int]]:
        addrs = sorted(self.nodes)
        adj: dict[int, list[int]] = {a: [] for a in addrs}
        r = self.link.max_range
        for i, a in enumerate(addrs):
            pa = self.nodes[a]
            for b in addrs[i + 1:]:
                if pa.distance(self.nodes[b]) <= r:
                    adj[a].append(b)
                    adj[b].append(a)
        return adj

    def path_to_root(self, addr: int) -> list[int]:
        path = [addr]
        while path[-1] != COORDINATOR:
            path.append(self.parent[path[-1]])
        return path

    def depth(self, addr: int) -> int:
        return len(self.path_to_root(addr)) - 1

    def children(self, addr: int) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p == addr)


def join(topology: Topology, position: Position, *, router: bool = True) -> int:
    return topology.join(position, router=router)


def route(topology: Topology, src: int, dst: int) -> list[int]:
    """Hop path from src to dst, both ends included."""
    for addr in (src, dst):
        if addr not in topology.nodes:
            raise NoRoute(f"address {addr} has not joined")
    if src == dst:
        return [src]
    if topology.routing_mode == TREE:
        return _tree_route(topology, src, dst)
    return _mesh_route(topology, src, dst)


def _tree_route(topology: Topology, src: int, dst: int) -> list[int]:
    up = topology.path_to_root(src)
    down = topology.path_to_root(dst)
    on_up = {a: i for i, a in enumerate(up)}
    for j, a in enumerate(down):
        if a in on_up:
            path = up[: on_up[a] + 1] + down[:j][::-1]
            break
    for a, b in zip(path, path[1:]):
        if not topology.link_up(a, b):
            raise NoRoute(f"tree link {a}-{b} is down")
    return path


def _mesh_route(topology: Topology, src: int, dst: int) -> list[int]:
    # Only routers relay; end devices may still be endpoints.
    prev = {src: None}
    queue = deque([src])
    while queue:
        a = queue.popleft()
        if a == dst:
            break
        if a != src and a not in topology.routers:
            continue
        for b in topology.neighbors(a):
            if b not in prev and topology.link_up(a, b):
                prev[b] = a
                queue.append(b)
    if dst not in prev:
        raise NoRoute(f"no path from {src} to {dst}")
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


@dataclass(frozen=True)
class DeliveryOutcome:
    frame: Frame
    sent_at: float
    delivered: bool
    at: float | None = None
    reason: str | None = None
    hops: int = 0
    latency_samples: tuple[float, ...] = ()
    failed_hop: tuple[int, int] | None = None

    @property
    def delay(self) -> float | None:
        return None if self.at is None else self.at - self.sent_at


OUT_OF_RANGE = "out_of_range"
DISTANCE_LOSS = "distance_loss"
INTERFERENCE = "interference"
NO_ROUTE = "no_route"


class Medium:
    """Seeded radio medium over a topology.

    Each directed link serializes frames FIFO: a frame starts only after the
    previous one finished serializing, and deliveries on a link are never
    closer together than the serialization time of the later frame.
    """

    def __init__(self, topology: Topology, seed: int = 0):
        self.topology = topology
        self.link = topology.link
        self.rng = random.Random(seed)
        self._busy_until: dict[tuple[int, int], float] = {}
        self._last_delivery: dict[tuple[int, int], float] = {}
        self.stats = {"sent": 0, "delivered": 0, "delivered_bits": 0}
        self.drops: dict[str, int] = {}

    def airtime_ms(self, frame: Frame) -> float:
        return frame.bits / self.link.bit_rate_cap * 1000.0

    def transmit(self, frame: Frame, now: float) -> DeliveryOutcome:
        self.stats["sent"] += 1
        try:
            path = route(self.topology, frame.src, frame.dst)
        except NoRoute:
            return self._drop(frame, now, NO_ROUTE, 0, (), None)
        t = now
        samples = []
        for i, (a, b) in enumerate(zip(path, path[1:])):
            d = self.topology.distance(a, b)
            if d > self.link.max_range:
                return self._drop(frame, now, OUT_OF_RANGE, i, samples, (a, b))
            # Both draws happen on every hop so the RNG stream does not depend on outcomes.
            u_interf = self.rng.random()
            u_dist = self.rng.random()
            lo, hi = self.link.latency_ms if i == 0 else EXTRA_HOP_LATENCY
            latency = self.rng.uniform(lo, hi)
            if u_interf < self.link.interference_loss:
                return self._drop(frame, now, INTERFERENCE, i, samples, (a, b))
            if u_dist < self.link.distance_loss(d):
                return self._drop(frame, now, DISTANCE_LOSS, i, samples, (a, b))
            samples.append(latency)
            t = self._serialize(frame, (a, b), t, latency)
        self.stats["delivered"] += 1
        self.stats["delivered_bits"] += frame.bits
        return DeliveryOutcome(frame, now, True, at=t, hops=len(path) - 1,
                               latency_samples=tuple(samples))

    def _serialize(self, frame: Frame, link: tuple[int, int], t: float, latency: float) -> float:
        air = self.airtime_ms(frame)
        start = max(t, self._busy_until.get(link, -math.inf))
        self._busy_until[link] = start + air
        arrival = max(start + max(latency, air), self._last_delivery.get(link, -math.inf) + air)
        self._last_delivery[link] = arrival
        return arrival

    def _drop(self, frame, now, reason, hop, samples, failed_hop) -> DeliveryOutcome:
        self.drops[reason] = self.drops.get(reason, 0) + 1
        return DeliveryOutcome(frame, now, False, reason=reason, hops=hop,
                               latency_samples=tuple(samples), failed_hop=failed_hop)

    def ack_lost(self) -> bool:
        """Bernoulli draw for a lost link-layer acknowledgement."""
        return self.rng.random() < self.link.interference_loss


def random_topology(n: int, rng: random.Random, *, link: LinkModel | None = None,
                    routing_mode: str = MESH, extent: float = 250.0) -> Topology:
    """Grow a connected topology by placing each node within range of an existing one."""
    topo = Topology(link or LinkModel(), routing_mode)
    placed: list[Position] = [topo.coordinator_position]
    r = topo.link.max_range
    while len(topo.nodes) < n:
        anchor = rng.choice(placed)
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.2 * r, 0.95 * r)
        p = Position(max(-extent, min(extent, anchor.x + dist * math.cos(ang))),
                     max(-extent, min(extent, anchor.y + dist * math.sin(ang))))
        try:
            topo.join(p)
        except OutOfRange:
            continue
        placed.append(p)
    return topo

