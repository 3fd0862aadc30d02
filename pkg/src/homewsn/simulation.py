"""Discrete-event run of a scenario: nodes -> medium -> gateway -> store.

Everything random flows from the scenario seed (environment noise) and one
medium RNG (loss, latency, ack loss), so a run is a pure function of the
scenario file and seed.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .energy import BatteryState, drain, energy_report, period_timeline
from .gateway import CHANGE_DETECTED, THRESHOLD_RULE, Gateway, Uplink
from .medium import COORDINATOR, FRAME_OVERHEAD, Frame, Medium, NoRoute, Topology, route
from .nodes import PROFILES, RoomId, SensorNode, SensorSample, chunk_message, encode_message, node_tick
from .pipeline import TAG_BYTES, PayloadKey, PayloadOpener, PayloadSealer, ascii_size, compress, decompress
from .scenario import Scenario, env_snapshot
from .store import LocalStore, StorageBackend

log = logging.getLogger(__name__)

REPORT_VERSION = 1

# Event kinds, in tie-break order at equal timestamps.
INTERVAL, DELIVER, RETRY, TICK, FLUSH = range(5)


@dataclass
class Network:
    topology: Topology
    rooms: dict[RoomId, int]
    routers: list[int]


def build_network(scenario: Scenario) -> Network:
    topo = Topology(scenario.link, scenario.routing_mode, scenario.coordinator)
    routers = [topo.join(p, router=True) for p in scenario.routers]
    rooms = {}
    for room in RoomId:
        if room in scenario.rooms:
            rooms[room] = topo.join(scenario.rooms[room].position, router=False)
    return Network(topo, rooms, routers)


@dataclass(frozen=True)
class Load:
    period: float
    tx_ms: float
    rx_ms: float


def steady_traffic(scenario: Scenario, period: float | None = None) -> dict[int, Load]:
    """Per battery node airtime per ``period``: own frames plus frames relayed for descendants.

    Message sizes come from the environment at t = 0; retransmissions are ignored.
    """
    period = scenario.sampling_period if period is None else period
    net = build_network(scenario)
    ticks = period / scenario.sampling_period
    bit_rate = scenario.link.bit_rate_cap
    overhead = TAG_BYTES if scenario.encryption else 0
    own = {addr: 0.0 for addr in list(net.rooms.values()) + net.routers}
    relay = dict.fromkeys(own, 0.0)
    for room, addr in net.rooms.items():
        snap = env_snapshot(scenario, room, 0)
        msg = encode_message(room, [SensorSample.of(f, snap[f]) for f in PROFILES[room].fields])
        bits = sum(8 * (len(c) + overhead + FRAME_OVERHEAD) for c in chunk_message(msg, scenario.link.max_payload - overhead))
        air = bits / bit_rate * 1000.0 * ticks
        own[addr] += air
        try:
            path = route(net.topology, addr, COORDINATOR)
        except NoRoute:
            continue
        for hop in path[1:-1]:
            relay[hop] += air
    return {a: Load(period, own[a] + relay[a], relay[a]) for a in own}


@dataclass
class RunResult:
    report: dict
    records: int
    out_dir: Path | None = None
    alerts: list = field(default_factory=list)
    actuator_events: list = field(default_factory=list)


class Simulation:
    def __init__(self, scenario: Scenario, backend: StorageBackend | None = None):
        self.scenario = scenario
        self.net = build_network(scenario)
        self.medium = Medium(self.net.topology, seed=scenario.seed)
        key = PayloadKey.from_hex(scenario.key_hex)
        self.nodes: dict[int, SensorNode] = {}
        for room, addr in self.net.rooms.items():
            self.nodes[addr] = SensorNode(
                addr, room, sampling_period=scenario.sampling_period,
                max_payload=scenario.link.max_payload,
                sealer=PayloadSealer(key) if scenario.encryption else None,
            )
        self.gateway = Gateway(reassembly_timeout=scenario.reassembly_timeout,
                               opener=PayloadOpener(key) if scenario.encryption else None,
                               aggregate_window=scenario.aggregate_window)
        self.backend = backend
        self.uplink = Uplink(backend) if backend is not None else None
        self.batteries = {a: BatteryState(scenario.battery_mah) for a in sorted(list(self.nodes) + self.net.routers)}
        self.deaths: dict[int, float] = {}
        self._tx_ms = dict.fromkeys(self.batteries, 0.0)
        self._rx_ms = dict.fromkeys(self.batteries, 0.0)
        self._queue: list = []
        self._order = 0
        self.actuator_events = []
        self.delivery_latency: list[float] = []
        self.counters = {"retransmissions": 0, "duplicate_deliveries": 0, "frames_lost": 0,
                         "frames_originated": 0, "messages_sent": 0}

    def _push(self, t: float, kind: int, data=None) -> None:
        heapq.heappush(self._queue, (t, kind, self._order, data))
        self._order += 1

    def _alive(self, addr: int) -> bool:
        return addr not in self.deaths

    def run(self) -> RunResult:
        sc = self.scenario
        P = sc.sampling_period
        for k in range(0, math.ceil(sc.duration / P)):
            for addr in sorted(self.nodes):
                self._push(k * P, TICK, addr)
            if k:
                self._push(k * P, INTERVAL, (k - 1) * P)
        self._push(sc.duration, INTERVAL, (math.ceil(sc.duration / P) - 1) * P)
        for t in range(sc.batch_interval, sc.duration + 1, sc.batch_interval):
            self._push(t, FLUSH)

        last_t = 0.0
        while self._queue:
            t, kind, _, data = heapq.heappop(self._queue)
            last_t = max(last_t, t)
            if kind == TICK:
                self._tick(data, t)
            elif kind == DELIVER:
                self._deliver(data, t)
            elif kind == RETRY:
                frame, attempt = data
                if self._alive(frame.src):
                    self.counters["retransmissions"] += 1
                    self._send(frame, t, attempt)
            elif kind == INTERVAL:
                self._account_interval(data, min(P, t - data))
            elif kind == FLUSH:
                self._flush(t)
        self._flush(last_t)
        self.gateway.aggregator.flush()
        return RunResult(self._report(), self.gateway.stats["records"],
                         alerts=list(self.gateway.alerts), actuator_events=self.actuator_events)

    def _tick(self, addr: int, t: float) -> None:
        if not self._alive(addr):
            return
        node = self.nodes[addr]
        res = node_tick(node, env_snapshot(self.scenario, node.room, t), t)
        self.actuator_events.extend(res.events)
        self.counters["messages_sent"] += 1
        for frame in res.frames:
            self.counters["frames_originated"] += 1
            self._send(frame, t, 0)

    def _send(self, frame: Frame, t: float, attempt: int) -> None:
        outcome = self.medium.transmit(frame, t)
        air = self.medium.airtime_ms(frame)
        self._charge_airtime(frame.src, outcome.hops if not outcome.delivered else None, air)
        retry = False
        if outcome.delivered:
            self.delivery_latency.append(outcome.delay)
            self._push(outcome.at, DELIVER, frame)
            if attempt < self.scenario.retries and self.medium.ack_lost():
                retry = True
                self.counters["duplicate_deliveries"] += 1
        else:
            retry = attempt < self.scenario.retries
            if not retry:
                self.counters["frames_lost"] += 1
        if retry:
            self._push(t + self.scenario.ack_timeout, RETRY, (frame, attempt + 1))

    def _charge_airtime(self, src: int, failed_hop: int | None, air: float) -> None:
        self._tx_ms[src] += air
        try:
            path = route(self.net.topology, src, COORDINATOR)
        except NoRoute:
            return
        reached = path[1:-1] if failed_hop is None else path[1:failed_hop + 1]
        for hop in reached:
            if hop in self._rx_ms:
                self._rx_ms[hop] += air
                self._tx_ms[hop] += air

    def _account_interval(self, start: float, length: float) -> None:
        if length <= 0:
            return
        duty = self.scenario.duty_cycle
        for addr, battery in self.batteries.items():
            if not self._alive(addr):
                continue
            tl = period_timeline(length, self._tx_ms[addr], self._rx_ms[addr], duty)
            died = drain(battery, tl, self.scenario.energy, start)
            self._tx_ms[addr] = self._rx_ms[addr] = 0.0
            if died is not None:
                self.deaths[addr] = died
                log.info("node %d battery exhausted at %.0f ms", addr, died)
                for nb in list(self.net.topology.nodes):
                    if nb != addr:
                        self.net.topology.set_link_down(addr, nb)

    def _deliver(self, frame: Frame, t: float) -> None:
        self.gateway.expire(t)
        self.gateway.receive(frame, t)

    def _flush(self, t: float) -> None:
        self.gateway.expire(t)
        if self.uplink is not None:
            self.uplink.enqueue(self.gateway.take_outbox())
            self.uplink.flush()

    # -- reporting ------------------------------------------------------------

    def _report(self) -> dict:
        sc = self.scenario
        topo = self.net.topology
        room_of = {a: n.room.value for a, n in self.nodes.items()}
        nodes = {}
        for addr in sorted(topo.nodes):
            pos = topo.nodes[addr]
            role = "coordinator" if addr == COORDINATOR else ("router" if addr in self.net.routers else "end_device")
            nodes[str(addr)] = {"role": role, "room": room_of.get(addr), "x": pos.x, "y": pos.y,
                                "parent": topo.parent.get(addr)}
        lat = self.delivery_latency
        alerts = {THRESHOLD_RULE: 0, CHANGE_DETECTED: 0}
        for a in self.gateway.alerts:
            alerts[a.kind] += 1
        actuators = {}
        for ev in self.actuator_events:
            key = f"{ev.room.value}.{ev.actuator.value}"
            actuators[key] = actuators.get(key, 0) + 1

        return {
            "version": REPORT_VERSION,
            "scenario": {
                "seed": sc.seed, "duration_ms": sc.duration, "routing_mode": sc.routing_mode,
                "sampling_period_ms": sc.sampling_period, "encryption": sc.encryption,
                "duty_cycle": {"mode": sc.duty_cycle.mode, "awake_window_ms": sc.duty_cycle.awake_window,
                               "period_ms": sc.duty_cycle.period},
                "link": {"max_range_m": sc.link.max_range, "reliable_range_m": sc.link.reliable_range,
                         "latency_ms": list(sc.link.latency_ms), "bit_rate_bps": sc.link.bit_rate_cap,
                         "interference_loss": sc.link.interference_loss, "max_payload": sc.link.max_payload,
                         "frequency_band": sc.link.frequency_band},
            },
            "nodes": nodes,
            "medium": {
                **self.medium.stats,
                "drops": dict(sorted(self.medium.drops.items())),
                **self.counters,
                "delivery_delay_ms": {
                    "count": len(lat),
                    "min": min(lat) if lat else None,
                    "max": max(lat) if lat else None,
                    "mean": math.fsum(lat) / len(lat) if lat else None,
                },
            },
            "gateway": {
                **self.gateway.stats,
                "reassembly_timeouts": self.gateway.reassembler.timeouts,
                "reassembly_discarded_frames": self.gateway.reassembler.discarded_frames,
            },
            "alerts": alerts,
            "actuator_events": dict(sorted(actuators.items())),
            "storage": dict(self.uplink.stats, pending_batches=len(self.uplink.queue)) if self.uplink else None,
            "aggregation": self._aggregation_section(),
            "compression": self._compression_section(),
            "energy": energy_report(self.batteries, sc.energy, duration=sc.duration, deaths=self.deaths),
        }

    def _aggregation_section(self) -> dict:
        sc = self.scenario
        windows = self.gateway.aggregator.windows
        per_stream = {}
        for w in windows:
            per_stream.setdefault(f"{w.room}.{w.field}", 0)
            per_stream[f"{w.room}.{w.field}"] += 1
        at = {}
        if sc.aggregate_at == "router":
            # Attribute each stream's windows to the first relay on the room's path, else the gateway.
            for room, addr in self.net.rooms.items():
                parent = self.net.topology.parent[addr]
                at[room.value] = parent
        return {"at": sc.aggregate_at, "window": sc.aggregate_window, "windows": len(windows),
                "per_stream": dict(sorted(per_stream.items())),
                "computed_at": {r: at.get(r, COORDINATOR) for r in sorted(room.value for room in self.net.rooms)}}

    def _compression_section(self) -> dict:
        series: dict[str, list] = {}
        for r in self._persisted():
            series.setdefault(f"{r.room}.{r.field}", []).append(r.value)
        out = {}
        raw_total = packed_total = 0
        for key in sorted(series):
            values = series[key]
            packed = compress(values)
            assert decompress(packed.to_bytes()) == values
            raw, size = ascii_size(values), len(packed.to_bytes())
            raw_total += raw
            packed_total += size
            out[key] = {"values": len(values), "ascii_bytes": raw, "compressed_bytes": size}
        return {"streams": out, "ascii_bytes": raw_total, "compressed_bytes": packed_total}

    def _persisted(self):
        if self.backend is None:
            return []
        recs = []
        for room in self.backend.list_rooms():
            for f in self.backend.list_fields(room):
                recs.extend(self.backend.query(room, f, -(1 << 62), 1 << 62))
        return recs


def write_report(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def simulate(scenario: Scenario, out_dir: str | Path, backend: StorageBackend | None = None) -> RunResult:
    """Run a scenario and write ``report.json``, ``alerts.jsonl``, ``aggregates.jsonl`` and ``records/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if backend is None:
        backend = LocalStore(out / "records")
    sim = Simulation(scenario, backend)
    result = sim.run()
    write_report(result.report, out / "report.json")
    with open(out / "alerts.jsonl", "w") as f:
        for a in sim.gateway.alerts:
            f.write(json.dumps(a.as_dict(), sort_keys=True) + "\n")
    with open(out / "aggregates.jsonl", "w") as f:
        for w in sim.gateway.aggregator.windows:
            f.write(json.dumps(w.as_dict(), sort_keys=True) + "\n")
    result.out_dir = out
    return result

