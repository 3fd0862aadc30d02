"""Per-room sensor nodes: threshold rules, actuator state, message encoding and framing."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .medium import COORDINATOR, DEFAULT_MAX_PAYLOAD, Frame


class NodeError(Exception):
    pass


class MissingField(NodeError, KeyError):
    pass


class GrammarError(NodeError, ValueError):
    pass


class UnknownRoom(NodeError, ValueError):
    pass


class UnknownField(NodeError, ValueError):
    pass


class RoomId(str, enum.Enum):
    LIVING_ROOM = "living_room"
    KITCHEN = "kitchen"
    PORCH = "porch"
    TERRACE_GARDEN = "terrace_garden"

    @classmethod
    def parse(cls, name) -> RoomId:
        try:
            return cls(name)
        except ValueError:
            raise UnknownRoom(f"unknown room {name!r}") from None


class Unit(str, enum.Enum):
    ADC = "adc_counts"
    CELSIUS = "celsius"
    PERCENT_RH = "percent_rh"
    CENTIMETERS = "centimeters"
    BOOLEAN = "boolean"


UNIT_RANGE = {
    Unit.ADC: (0, 1023),
    Unit.CELSIUS: (-40.0, 80.0),
    Unit.PERCENT_RH: (0.0, 100.0),
    Unit.CENTIMETERS: (0, 400),
    Unit.BOOLEAN: (0, 1),
}

# Units rendered with two decimals; everything else is an integer reading.
DECIMAL_UNITS = frozenset({Unit.CELSIUS, Unit.PERCENT_RH})

FIELD_UNITS = {
    "temperature": Unit.CELSIUS,
    "humidity": Unit.PERCENT_RH,
    "sound": Unit.ADC,
    "light": Unit.ADC,
    "flame": Unit.ADC,
    "gas": Unit.ADC,
    "distance": Unit.CENTIMETERS,
    "motion": Unit.BOOLEAN,
    "shock": Unit.BOOLEAN,
    "soil_moisture": Unit.ADC,
    "water_level": Unit.ADC,
}

ROOM_FIELDS = {
    RoomId.LIVING_ROOM: ("temperature", "humidity", "sound", "light"),
    RoomId.KITCHEN: ("flame", "gas"),
    RoomId.PORCH: ("distance", "motion", "shock"),
    RoomId.TERRACE_GARDEN: ("temperature", "humidity", "soil_moisture", "water_level"),
}


def quantize(unit: Unit, value: float) -> float | int:
    """Clamp to the unit range and round to its resolution."""
    lo, hi = UNIT_RANGE[unit]
    v = min(max(value, lo), hi)
    if unit in DECIMAL_UNITS:
        return round(float(v), 2)
    return int(round(v))


@dataclass(frozen=True)
class SensorSample:
    field: str
    value: float | int
    unit: Unit

    def __post_init__(self):
        lo, hi = UNIT_RANGE[self.unit]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.field}={self.value} outside {self.unit.value} range [{lo}, {hi}]")
        if self.unit not in DECIMAL_UNITS and self.value != int(self.value):
            raise ValueError(f"{self.field} is an integer reading, got {self.value}")
        if self.unit in DECIMAL_UNITS and round(self.value, 2) != self.value:
            raise ValueError(f"{self.field} has more than two decimals: {self.value}")

    @classmethod
    def of(cls, field_name: str, raw: float) -> SensorSample:
        unit = FIELD_UNITS[field_name]
        return cls(field_name, quantize(unit, raw), unit)


class Actuator(str, enum.Enum):
    LED = "led"
    BUZZER = "buzzer"
    DISCO_PAIR = "disco_pair"


class Effect(str, enum.Enum):
    ON_FOR = "on_for"
    LATCH_ON = "latch_on"
    TOGGLE_OPPOSITE = "toggle_opposite"


@dataclass(frozen=True)
class ActuatorCommand:
    actuator: Actuator
    effect: Effect
    duration: int = 0

    def __post_init__(self):
        if self.actuator is Actuator.DISCO_PAIR and self.effect is not Effect.TOGGLE_OPPOSITE:
            raise ValueError("disco_pair only supports toggle_opposite")
        if self.effect is Effect.ON_FOR and self.duration <= 0:
            raise ValueError("on_for needs a positive duration")


_OPS = {
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
}


@dataclass(frozen=True)
class Comparison:
    field: str
    op: str
    constant: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unsupported comparison {self.op!r}")

    def holds(self, value) -> bool:
        return _OPS[self.op](value, self.constant)

    def __str__(self):
        return f"{self.field} {self.op} {self.constant:g}"


@dataclass(frozen=True)
class ThresholdRule:
    """Fires when any of its comparisons holds (one comparison or a two-way OR)."""

    conditions: tuple[Comparison, ...]
    action: ActuatorCommand

    def __post_init__(self):
        if not 1 <= len(self.conditions) <= 2:
            raise ValueError("a rule has one comparison or a disjunction of two")

    def fields(self) -> set[str]:
        return {c.field for c in self.conditions}

    def __str__(self):
        return " OR ".join(map(str, self.conditions))


@dataclass(frozen=True)
class RoomProfile:
    room: RoomId
    fields: tuple[str, ...]
    rules: tuple[ThresholdRule, ...] = ()

    def __post_init__(self):
        for rule in self.rules:
            missing = rule.fields() - set(self.fields)
            if missing:
                raise ValueError(f"rule {rule} references fields not in {self.room.value}: {sorted(missing)}")

    def unit(self, field_name: str) -> Unit:
        if field_name not in self.fields:
            raise UnknownField(f"{self.room.value} has no field {field_name!r}")
        return FIELD_UNITS[field_name]


def _rule(conds, actuator, effect, duration=0):
    return ThresholdRule(tuple(Comparison(*c) for c in conds), ActuatorCommand(actuator, effect, duration))


def builtin_profiles() -> dict[RoomId, RoomProfile]:
    return {
        RoomId.LIVING_ROOM: RoomProfile(RoomId.LIVING_ROOM, ROOM_FIELDS[RoomId.LIVING_ROOM], (
            _rule([("light", ">", 500)], Actuator.DISCO_PAIR, Effect.TOGGLE_OPPOSITE),
            _rule([("sound", ">", 30)], Actuator.LED, Effect.ON_FOR, 2000),
        )),
        RoomId.KITCHEN: RoomProfile(RoomId.KITCHEN, ROOM_FIELDS[RoomId.KITCHEN], (
            _rule([("flame", "<", 800), ("gas", ">", 600)], Actuator.BUZZER, Effect.ON_FOR, 1000),
        )),
        RoomId.PORCH: RoomProfile(RoomId.PORCH, ROOM_FIELDS[RoomId.PORCH], (
            _rule([("shock", "==", 1)], Actuator.LED, Effect.LATCH_ON),
        )),
        RoomId.TERRACE_GARDEN: RoomProfile(RoomId.TERRACE_GARDEN, ROOM_FIELDS[RoomId.TERRACE_GARDEN], (
            _rule([("water_level", ">", 600)], Actuator.BUZZER, Effect.ON_FOR, 1000),
        )),
    }


PROFILES = builtin_profiles()


@dataclass(frozen=True)
class ActuatorEvent:
    room: RoomId
    actuator: Actuator
    effect: Effect
    start: float
    end: float | None
    rule: int

    def is_active(self, t: float) -> bool:
        if t < self.start:
            return False
        return self.end is None or t <= self.end


def _values(samples) -> dict[str, float]:
    if isinstance(samples, Mapping):
        return dict(samples)
    return {s.field: s.value for s in samples}


def evaluate_rules(profile: RoomProfile, samples, now: float) -> list[ActuatorEvent]:
    values = _values(samples)
    events = []
    for i, rule in enumerate(profile.rules):
        for c in rule.conditions:
            if c.field not in values:
                raise MissingField(f"{profile.room.value}: no sample for {c.field!r}")
        if not any(c.holds(values[c.field]) for c in rule.conditions):
            continue
        cmd = rule.action
        if cmd.effect is Effect.ON_FOR:
            end = now + cmd.duration
        elif cmd.effect is Effect.LATCH_ON:
            end = None
        else:
            end = now
        events.append(ActuatorEvent(profile.room, cmd.actuator, cmd.effect, now, end, i))
    return events


def _render(sample: SensorSample) -> str:
    if sample.unit in DECIMAL_UNITS:
        return f"{sample.value:.2f}"
    return str(int(sample.value))


def encode_message(room: RoomId, samples: Sequence[SensorSample]) -> bytes:
    """ASCII line ``R:<room>;<field>=<value>;...\\n``."""
    body = ";".join(f"{s.field}={_render(s)}" for s in samples)
    return f"R:{RoomId(room).value};{body}\n".encode("ascii")


def decode_message(message: bytes) -> tuple[RoomId, list[SensorSample]]:
    try:
        text = bytes(message).decode("ascii")
    except UnicodeDecodeError:
        raise GrammarError("message is not ASCII") from None
    if not text.startswith("R:") or not text.endswith("\n") or text.count("\n") != 1:
        raise GrammarError(f"bad framing: {text[:40]!r}")
    parts = text[2:-1].split(";")
    room = RoomId.parse(parts[0])
    profile = PROFILES[room]
    samples = []
    seen = set()
    for part in parts[1:]:
        name, eq, raw = part.partition("=")
        if not eq:
            raise GrammarError(f"bad field token {part!r}")
        if name not in profile.fields:
            raise GrammarError(f"{room.value} has no field {name!r}")
        if name in seen:
            raise GrammarError(f"field {name!r} repeated")
        seen.add(name)
        unit = FIELD_UNITS[name]
        try:
            value = float(raw) if unit in DECIMAL_UNITS else int(raw)
            samples.append(SensorSample(name, value, unit))
        except ValueError as exc:
            raise GrammarError(f"bad value for {name}: {raw!r} ({exc})") from None
    if not samples:
        raise GrammarError("message carries no fields")
    return room, samples


def chunk_message(message: bytes, max_payload: int) -> list[bytes]:
    if max_payload < 1:
        raise ValueError("max_payload must be >= 1")
    return [message[i:i + max_payload] for i in range(0, len(message), max_payload)]


@dataclass
class TickResult:
    samples: list[SensorSample]
    events: list[ActuatorEvent]
    frames: list[Frame]
    message: bytes


@dataclass
class SensorNode:
    """One room's microcontroller + radio. Owns the frame sequence counter and actuator state."""

    address: int
    room: RoomId
    profile: RoomProfile | None = None
    sampling_period: int = 1000
    max_payload: int = DEFAULT_MAX_PAYLOAD
    seq: int = 0
    epoch: int = 0
    sealer: object = None  # pipeline.PayloadSealer when encryption is on
    led_latched: bool = False
    disco_pins: tuple[int, int] = (0, 1)
    active: list[ActuatorEvent] = field(default_factory=list)

    def __post_init__(self):
        self.room = RoomId(self.room)
        if self.profile is None:
            self.profile = PROFILES[self.room]

    def next_seq(self) -> tuple[int, int]:
        seq, epoch = self.seq, self.epoch
        self.seq = (self.seq + 1) & 0xFF
        if self.seq == 0:
            self.epoch += 1
        return seq, epoch

    def read(self, env_snapshot: Mapping[str, float]) -> list[SensorSample]:
        return [SensorSample.of(f, env_snapshot[f]) for f in self.profile.fields]

    def actuators_at(self, t: float) -> dict[str, int]:
        state = {a.value: 0 for a in Actuator}
        for ev in self.active:
            if ev.is_active(t) and ev.actuator is not Actuator.DISCO_PAIR:
                state[ev.actuator.value] = 1
        if self.led_latched:
            state[Actuator.LED.value] = 1
        state[Actuator.DISCO_PAIR.value] = self.disco_pins[0]
        return state


def node_tick(node: SensorNode, env_snapshot: Mapping[str, float], now: float) -> TickResult:
    samples = node.read(env_snapshot)
    events = evaluate_rules(node.profile, samples, now)
    node.active = [e for e in node.active if e.end is not None and e.end >= now]
    latched = False
    for ev in events:
        if ev.effect is Effect.TOGGLE_OPPOSITE:
            a = 1 - node.disco_pins[0]
            node.disco_pins = (a, 1 - a)
        elif ev.effect is Effect.LATCH_ON:
            latched = True
        else:
            node.active.append(ev)
    # A latch holds only while its condition keeps firing.
    node.led_latched = latched

    message = encode_message(node.room, samples)
    overhead = node.sealer.overhead if node.sealer is not None else 0
    frames = []
    for chunk in chunk_message(message, node.max_payload - overhead):
        seq, epoch = node.next_seq()
        if node.sealer is not None:
            chunk = node.sealer.seal(chunk, node.address, seq, epoch)
        frames.append(Frame.build(node.address, COORDINATOR, seq, chunk,
                                  encrypted=node.sealer is not None, max_payload=node.max_payload))
    return TickResult(samples, events, frames, message)
