"""Synthetic home environment and the JSON scenario file.

Every environment value is a pure function of (seed, room, field, t):
baseline + diurnal sinusoid + seeded Gaussian noise, replaced by any
timed event override active at t, then clamped to the field's unit range.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .energy import DutyCycle, EnergyModel
from .medium import LinkModel, Position, ROUTING_MODES, TREE
from .nodes import FIELD_UNITS, ROOM_FIELDS, UNIT_RANGE, RoomId, UnknownField

DAY_MS = 86_400_000
SEED_MAX = (1 << 64) - 1


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class SignalSpec:
    baseline: float
    diurnal_amplitude: float = 0.0
    noise_stddev: float = 0.0


# Quiet-house defaults; thresholds are crossed only occasionally or through events.
DEFAULT_SIGNALS = {
    "temperature": SignalSpec(27.0, 3.0, 0.1),
    "humidity": SignalSpec(55.0, 10.0, 0.5),
    "sound": SignalSpec(14.0, 4.0, 3.0),
    "light": SignalSpec(380.0, 180.0, 3.0),
    "flame": SignalSpec(1010.0, 0.0, 3.0),
    "gas": SignalSpec(180.0, 20.0, 3.0),
    "distance": SignalSpec(300.0, 0.0, 1.5),
    "motion": SignalSpec(0.0, 0.0, 0.0),
    "shock": SignalSpec(0.0, 0.0, 0.0),
    "soil_moisture": SignalSpec(520.0, 40.0, 3.0),
    "water_level": SignalSpec(380.0, 60.0, 2.0),
}

DEFAULT_POSITIONS = {
    RoomId.LIVING_ROOM: Position(8.0, 4.0),
    RoomId.KITCHEN: Position(-6.0, 10.0),
    RoomId.PORCH: Position(18.0, -6.0),
    RoomId.TERRACE_GARDEN: Position(-12.0, -14.0),
}


@dataclass(frozen=True)
class TimedEvent:
    at: int
    room: RoomId
    field: str
    override_value: float
    hold: int

    def active(self, t: float) -> bool:
        return self.at <= t < self.at + self.hold


@dataclass(frozen=True)
class RoomSetup:
    position: Position
    signals: dict[str, SignalSpec]


@dataclass(frozen=True)
class Scenario:
    seed: int = 42
    duration: int = 600_000
    rooms: dict[RoomId, RoomSetup] = field(default_factory=dict)
    events: tuple[TimedEvent, ...] = ()
    link: LinkModel = field(default_factory=LinkModel)
    routing_mode: str = TREE
    routers: tuple[Position, ...] = ()
    coordinator: Position = field(default_factory=lambda: Position(0.0, 0.0))
    time_scale: float = 1.0
    sampling_period: int = 1000
    battery_mah: float = 225.0
    energy: EnergyModel = field(default_factory=EnergyModel)
    duty_cycle: DutyCycle = field(default_factory=DutyCycle)
    encryption: bool = False
    key_hex: str = "000102030405060708090a0b0c0d0e0f"
    aggregate_at: str = "gateway"
    aggregate_window: int = 10
    retries: int = 3
    ack_timeout: int = 250
    batch_interval: int = 5000
    reassembly_timeout: int = 5000

    def __post_init__(self):
        if self.duration <= 0:
            raise ValidationError("duration_ms", "must be > 0")
        for i, ev in enumerate(self.events):
            if not 0 <= ev.at <= self.duration:
                raise ValidationError(f"events[{i}].at", f"{ev.at} outside [0, {self.duration}]")

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, seed=seed)


def env_at(scenario: Scenario, room: RoomId, field_name: str, t: float) -> float:
    room = RoomId(room)
    if field_name not in ROOM_FIELDS[room]:
        raise UnknownField(f"{room.value} has no field {field_name!r}")
    for ev in scenario.events:
        if ev.room is room and ev.field == field_name and ev.active(t):
            return ev.override_value
    setup = scenario.rooms.get(room)
    spec = setup.signals.get(field_name) if setup else None
    if spec is None:
        spec = DEFAULT_SIGNALS[field_name]
    value = spec.baseline
    if spec.diurnal_amplitude:
        value += spec.diurnal_amplitude * math.sin(2 * math.pi * (t * scenario.time_scale) / DAY_MS)
    if spec.noise_stddev:
        rng = random.Random(f"{scenario.seed}:{room.value}:{field_name}:{t!r}")
        value += rng.gauss(0.0, spec.noise_stddev)
    lo, hi = UNIT_RANGE[FIELD_UNITS[field_name]]
    return min(max(value, lo), hi)


def env_snapshot(scenario: Scenario, room: RoomId, t: float) -> dict[str, float]:
    return {f: env_at(scenario, room, f, t) for f in ROOM_FIELDS[RoomId(room)]}


# -- loading ------------------------------------------------------------------

def _num(obj: dict, key: str, path: str, default=None, *, integer=False, positive=False, minimum=None):
    if key not in obj:
        if default is None:
            raise ValidationError(f"{path}.{key}" if path else key, "required")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not math.isfinite(v)):
        raise ValidationError(f"{path}.{key}" if path else key, f"expected a number, got {v!r}")
    if integer and v != int(v):
        raise ValidationError(f"{path}.{key}" if path else key, f"expected an integer, got {v!r}")
    if positive and v <= 0:
        raise ValidationError(f"{path}.{key}" if path else key, f"must be > 0, got {v!r}")
    if minimum is not None and v < minimum:
        raise ValidationError(f"{path}.{key}" if path else key, f"must be >= {minimum}, got {v!r}")
    return int(v) if integer else v


def _position(obj, path) -> Position:
    if not isinstance(obj, dict):
        raise ValidationError(path, "expected {\"x\": .., \"y\": ..}")
    return Position(float(_num(obj, "x", path)), float(_num(obj, "y", path)))


def _room(name, path) -> RoomId:
    try:
        return RoomId(name)
    except ValueError:
        raise ValidationError(path, f"unknown room {name!r}; expected one of {[r.value for r in RoomId]}") from None


def _check_range(field_name, value, path):
    lo, hi = UNIT_RANGE[FIELD_UNITS[field_name]]
    if not lo <= value <= hi:
        raise ValidationError(path, f"{value} outside {field_name} range [{lo}, {hi}]")


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    if not isinstance(data, dict):
        raise ValidationError("<root>", "expected a JSON object")
    seed = _num(data, "seed", "", 42, integer=True, minimum=0)
    if seed > SEED_MAX:
        raise ValidationError("seed", "must fit in 64 bits")
    duration = _num(data, "duration_ms", "", 600_000, integer=True, positive=True)

    rooms_raw = data.get("rooms", {})
    if not isinstance(rooms_raw, dict):
        raise ValidationError("rooms", "expected an object keyed by room name")
    rooms = {}
    for name, spec in rooms_raw.items():
        path = f"rooms.{name}"
        room = _room(name, path)
        spec = spec or {}
        if not isinstance(spec, dict):
            raise ValidationError(path, "expected an object")
        pos = _position(spec["position"], f"{path}.position") if "position" in spec else DEFAULT_POSITIONS[room]
        signals = {}
        for fname, sig in (spec.get("signals") or {}).items():
            fpath = f"{path}.signals.{fname}"
            if fname not in ROOM_FIELDS[room]:
                raise ValidationError(fpath, f"{room.value} has no field {fname!r}")
            default = DEFAULT_SIGNALS[fname]
            signals[fname] = SignalSpec(
                _num(sig, "baseline", fpath, default.baseline),
                _num(sig, "diurnal_amplitude", fpath, default.diurnal_amplitude),
                _num(sig, "noise_stddev", fpath, default.noise_stddev, minimum=0),
            )
        rooms[room] = RoomSetup(pos, signals)

    events = []
    for i, ev in enumerate(data.get("events", [])):
        path = f"events[{i}]"
        if not isinstance(ev, dict):
            raise ValidationError(path, "expected an object")
        room = _room(ev.get("room"), f"{path}.room")
        fname = ev.get("field")
        if fname not in ROOM_FIELDS[room]:
            raise ValidationError(f"{path}.field", f"{room.value} has no field {fname!r}")
        at = _num(ev, "at_ms", path, integer=True, minimum=0)
        if at > duration:
            raise ValidationError(f"{path}.at_ms", f"{at} is after the scenario end ({duration})")
        value = _num(ev, "value", path)
        _check_range(fname, value, f"{path}.value")
        hold = _num(ev, "hold_ms", path, integer=True, positive=True)
        events.append(TimedEvent(at, room, fname, value, hold))

    link_raw = data.get("link", {})
    try:
        lat = link_raw.get("latency_ms", [15.0, 100.0])
        link = LinkModel(
            max_range=float(_num(link_raw, "max_range_m", "link", 100.0, positive=True)),
            reliable_range=float(_num(link_raw, "reliable_range_m", "link", 60.0, positive=True)),
            latency_ms=(float(lat[0]), float(lat[1])),
            bit_rate_cap=float(_num(link_raw, "bit_rate_bps", "link", 250_000.0, positive=True)),
            interference_loss=float(_num(link_raw, "interference_loss", "link", 0.01)),
            max_payload=_num(link_raw, "max_payload", "link", 84, integer=True, positive=True),
            frequency_band=str(link_raw.get("frequency_band", "2.4GHz")),
        )
    except (ValueError, TypeError, IndexError) as exc:
        raise ValidationError("link", str(exc)) from None

    routing_mode = data.get("routing_mode", TREE)
    if routing_mode not in ROUTING_MODES:
        raise ValidationError("routing_mode", f"expected one of {list(ROUTING_MODES)}")
    routers = tuple(_position(p, f"routers[{i}]") for i, p in enumerate(data.get("routers", [])))
    coordinator = _position(data["coordinator"], "coordinator") if "coordinator" in data else Position(0.0, 0.0)

    en = data.get("energy", {})
    try:
        energy = EnergyModel(
            voltage=_num(en, "voltage", "energy", 3.3, positive=True),
            current_tx=_num(en, "current_tx_ma", "energy", 45.0, minimum=0),
            current_rx_idle=_num(en, "current_rx_idle_ma", "energy", 31.0, minimum=0),
            current_sleep=_num(en, "current_sleep_ma", "energy", 0.001, minimum=0),
            current_mcu_active=_num(en, "current_mcu_active_ma", "energy", 10.0, minimum=0),
        )
        dc = en.get("duty_cycle", {})
        duty = DutyCycle(
            mode=dc.get("mode", "always_on"),
            awake_window=_num(dc, "awake_window_ms", "energy.duty_cycle", 100, integer=True, positive=True),
            period=_num(dc, "period_ms", "energy.duty_cycle", 1000, integer=True, positive=True),
        )
    except ValueError as exc:
        raise ValidationError("energy", str(exc)) from None
    battery = _num(en, "battery_mah", "energy", 225.0, positive=True)

    sec = data.get("security", {})
    enc = bool(sec.get("encryption", False))
    key_hex = sec.get("key_hex", "000102030405060708090a0b0c0d0e0f")
    try:
        if len(bytes.fromhex(key_hex)) != 16:
            raise ValueError
    except (ValueError, TypeError):
        raise ValidationError("security.key_hex", "expected 32 hex digits (AES-128 key)") from None

    agg = data.get("aggregation", {})
    aggregate_at = agg.get("at", "gateway")
    if aggregate_at not in ("gateway", "router"):
        raise ValidationError("aggregation.at", "expected 'gateway' or 'router'")

    gw = data.get("gateway", {})
    return Scenario(
        seed=seed,
        duration=duration,
        rooms=rooms,
        events=tuple(events),
        link=link,
        routing_mode=routing_mode,
        routers=routers,
        coordinator=coordinator,
        time_scale=_num(data, "time_scale", "", 1.0, positive=True),
        sampling_period=_num(data, "sampling_period_ms", "", 1000, integer=True, positive=True),
        battery_mah=battery,
        energy=energy,
        duty_cycle=duty,
        encryption=enc,
        key_hex=key_hex,
        aggregate_at=aggregate_at,
        aggregate_window=_num(agg, "window", "aggregation", 10, integer=True, positive=True),
        retries=_num(gw, "retries", "gateway", 3, integer=True, minimum=0),
        ack_timeout=_num(gw, "ack_timeout_ms", "gateway", 250, integer=True, positive=True),
        batch_interval=_num(gw, "batch_interval_ms", "gateway", 5000, integer=True, positive=True),
        reassembly_timeout=_num(gw, "reassembly_timeout_ms", "gateway", 5000, integer=True, positive=True),
    )


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return scenario_from_dict(data)


def default_scenario_path() -> Path:
    return Path(str(resources.files("homewsn") / "scenarios" / "home.json"))


def default_scenario() -> Scenario:
    return load_scenario(default_scenario_path())
