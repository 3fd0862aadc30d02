import pytest
from hypothesis import given, strategies as st

from homewsn.nodes import (
    FIELD_UNITS, PROFILES, ROOM_FIELDS, UNIT_RANGE, Actuator, ActuatorCommand, Comparison, Effect,
    GrammarError, MissingField, RoomId, RoomProfile, SensorNode, SensorSample, ThresholdRule, Unit,
    UnknownRoom, chunk_message, decode_message, encode_message, evaluate_rules, node_tick, quantize,
)

KITCHEN = PROFILES[RoomId.KITCHEN]
LIVING = PROFILES[RoomId.LIVING_ROOM]
PORCH = PROFILES[RoomId.PORCH]
GARDEN = PROFILES[RoomId.TERRACE_GARDEN]

QUIET_ENV = {
    "temperature": 22.0, "humidity": 45.0, "sound": 10, "light": 300, "flame": 1000, "gas": 100,
    "distance": 300, "motion": 0, "shock": 0, "soil_moisture": 500, "water_level": 100,
}


def sample_strategy(field):
    unit = FIELD_UNITS[field]
    lo, hi = UNIT_RANGE[unit]
    if unit in (Unit.CELSIUS, Unit.PERCENT_RH):
        return st.integers(int(lo * 100), int(hi * 100)).map(lambda v: SensorSample(field, v / 100, unit))
    return st.integers(lo, hi).map(lambda v: SensorSample(field, v, unit))


def room_samples(room):
    return st.tuples(*(sample_strategy(f) for f in ROOM_FIELDS[room])).map(list)


# -- rule truth tables ----------------------------------------------------------

@pytest.mark.parametrize("flame,gas,fires", [
    (799, 0, True), (800, 0, False), (801, 0, False),
    (1000, 601, True), (1000, 600, False), (1000, 599, False),
    (100, 900, True),
])
def test_kitchen_disjunction_strict(flame, gas, fires):
    events = evaluate_rules(KITCHEN, {"flame": flame, "gas": gas}, 0)
    assert bool(events) is fires
    if fires:
        (ev,) = events
        assert (ev.actuator, ev.effect, ev.end) == (Actuator.BUZZER, Effect.ON_FOR, 1000)


@pytest.mark.parametrize("light,sound,expected", [
    (500, 30, set()),
    (501, 30, {Actuator.DISCO_PAIR}),
    (500, 31, {Actuator.LED}),
    (501, 31, {Actuator.DISCO_PAIR, Actuator.LED}),
])
def test_living_room_rules(light, sound, expected):
    samples = {"temperature": 20.0, "humidity": 40.0, "light": light, "sound": sound}
    assert {e.actuator for e in evaluate_rules(LIVING, samples, 5)} == expected


@pytest.mark.parametrize("shock,fires", [(0, False), (1, True)])
def test_porch_latch(shock, fires):
    events = evaluate_rules(PORCH, {"distance": 100, "motion": 1, "shock": shock}, 7)
    assert bool(events) is fires
    if fires:
        assert events[0].end is None and events[0].effect is Effect.LATCH_ON


@pytest.mark.parametrize("level,fires", [(600, False), (601, True)])
def test_garden_water_level(level, fires):
    samples = {"temperature": 20.0, "humidity": 40.0, "soil_moisture": 10, "water_level": level}
    assert bool(evaluate_rules(GARDEN, samples, 0)) is fires


def test_missing_field_raises():
    with pytest.raises(MissingField):
        evaluate_rules(KITCHEN, {"flame": 900}, 0)


@given(room_samples(RoomId.KITCHEN), st.integers(0, 10**9))
def test_kitchen_oracle(samples, now):
    v = {s.field: s.value for s in samples}
    events = evaluate_rules(KITCHEN, samples, now)
    assert bool(events) == (v["flame"] < 800 or v["gas"] > 600)
    for ev in events:
        assert ev.start == now and ev.end == now + 1000


def test_rule_construction_limits():
    c = Comparison("gas", ">", 1)
    with pytest.raises(ValueError):
        ThresholdRule((c, c, c), ActuatorCommand(Actuator.LED, Effect.LATCH_ON))
    with pytest.raises(ValueError):
        ThresholdRule((), ActuatorCommand(Actuator.LED, Effect.LATCH_ON))
    with pytest.raises(ValueError):
        Comparison("gas", ">=", 1)
    with pytest.raises(ValueError):
        ActuatorCommand(Actuator.DISCO_PAIR, Effect.ON_FOR, 5)
    with pytest.raises(ValueError):
        RoomProfile(RoomId.PORCH, ("shock",), (ThresholdRule((c,), ActuatorCommand(Actuator.LED, Effect.LATCH_ON)),))


# -- samples ------------------------------------------------------------------

def test_sample_validation():
    with pytest.raises(ValueError):
        SensorSample("gas", 1024, Unit.ADC)
    with pytest.raises(ValueError):
        SensorSample("gas", 10.5, Unit.ADC)
    with pytest.raises(ValueError):
        SensorSample("temperature", 21.005, Unit.CELSIUS)
    assert SensorSample.of("gas", 2000.7).value == 1023
    assert SensorSample.of("temperature", 21.456).value == 21.46


@given(st.sampled_from(sorted(FIELD_UNITS)), st.floats(-1e6, 1e6))
def test_quantize_clamps_into_range(field, raw):
    unit = FIELD_UNITS[field]
    v = quantize(unit, raw)
    lo, hi = UNIT_RANGE[unit]
    assert lo <= v <= hi
    SensorSample(field, v, unit)


# -- grammar ------------------------------------------------------------------

def test_encode_known_message():
    samples = [SensorSample("flame", 1000, Unit.ADC), SensorSample("gas", 612, Unit.ADC)]
    assert encode_message(RoomId.KITCHEN, samples) == b"R:kitchen;flame=1000;gas=612\n"
    living = [SensorSample.of(f, v) for f, v in (("temperature", 21.5), ("humidity", 40), ("sound", 3), ("light", 9))]
    assert encode_message("living_room", living) == b"R:living_room;temperature=21.50;humidity=40.00;sound=3;light=9\n"


@pytest.mark.parametrize("room", list(RoomId))
@given(data=st.data())
def test_grammar_roundtrip(room, data):
    samples = data.draw(room_samples(room))
    got_room, got = decode_message(encode_message(room, samples))
    assert got_room is room
    assert got == samples


@pytest.mark.parametrize("bad", [
    b"kitchen;gas=1\n", b"R:kitchen;gas=1", b"R:kitchen;gas\n", b"R:kitchen;gas=1.5\n",
    b"R:kitchen;gas=1;gas=2\n", b"R:kitchen;temperature=1.00\n", b"R:kitchen\n", b"R:kitchen;gas=1\n\n",
    b"R:kitchen;gas=\xff\n", b"R:kitchen;gas=2000\n",
])
def test_decode_rejects(bad):
    with pytest.raises(GrammarError):
        decode_message(bad)


def test_decode_unknown_room():
    with pytest.raises(UnknownRoom):
        decode_message(b"R:garage;gas=1\n")


@given(st.binary(min_size=1, max_size=400), st.integers(1, 84))
def test_chunking_roundtrip(message, size):
    chunks = chunk_message(message, size)
    assert b"".join(chunks) == message
    assert all(1 <= len(c) <= size for c in chunks)


# -- node tick ----------------------------------------------------------------

def test_node_tick_frames_and_seq():
    node = SensorNode(5, RoomId.LIVING_ROOM, max_payload=20)
    r = node_tick(node, QUIET_ENV, 0)
    assert b"".join(f.payload for f in r.frames) == r.message
    assert [f.seq for f in r.frames] == list(range(len(r.frames)))
    assert all(f.src == 5 and f.dst == 0 for f in r.frames)


def test_seq_wraps_and_bumps_epoch():
    node = SensorNode(1, RoomId.KITCHEN, seq=255)
    assert node.next_seq() == (255, 0)
    assert node.next_seq() == (0, 1)


def test_on_for_expires():
    node = SensorNode(1, RoomId.KITCHEN)
    node_tick(node, {**QUIET_ENV, "gas": 700}, 1000)
    assert node.actuators_at(1500)["buzzer"] == 1
    assert node.actuators_at(2000)["buzzer"] == 1
    assert node.actuators_at(2001)["buzzer"] == 0
    node_tick(node, QUIET_ENV, 3000)
    assert node.active == []


@given(st.lists(st.booleans(), min_size=1, max_size=30))
def test_disco_pins_always_opposite(lights):
    node = SensorNode(1, RoomId.LIVING_ROOM)
    toggles = 0
    for i, bright in enumerate(lights):
        node_tick(node, {**QUIET_ENV, "light": 900 if bright else 100}, i * 1000)
        toggles += bright
        a, b = node.disco_pins
        assert a + b == 1
        assert a == toggles % 2


def test_latch_holds_while_shock_fires():
    node = SensorNode(1, RoomId.PORCH)
    node_tick(node, {**QUIET_ENV, "shock": 1}, 0)
    assert node.actuators_at(10_000)["led"] == 1
    node_tick(node, {**QUIET_ENV, "shock": 1}, 1000)
    assert node.led_latched
    node_tick(node, QUIET_ENV, 2000)
    assert node.actuators_at(2000)["led"] == 0


def test_listed_rule_examples():
    assert [(e.actuator, e.end) for e in evaluate_rules(KITCHEN, {"flame": 799, "gas": 0}, 0)] == [(Actuator.BUZZER, 1000)]
    assert evaluate_rules(KITCHEN, {"flame": 800, "gas": 600}, 0) == []
    living = evaluate_rules(LIVING, {"sound": 31, "light": 501, "temperature": 25, "humidity": 40}, 0)
    assert {(e.actuator, e.effect, e.end) for e in living} == {
        (Actuator.LED, Effect.ON_FOR, 2000), (Actuator.DISCO_PAIR, Effect.TOGGLE_OPPOSITE, 0)}
    (porch,) = evaluate_rules(PORCH, {"shock": 1, "motion": 0, "distance": 120}, 0)
    assert (porch.actuator, porch.effect, porch.end) == (Actuator.LED, Effect.LATCH_ON, None)


@pytest.mark.parametrize("room", [RoomId.KITCHEN, RoomId.LIVING_ROOM, RoomId.TERRACE_GARDEN])
@given(data=st.data())
def test_rule_evaluation_pure(room, data):
    samples = data.draw(room_samples(room))
    profile = PROFILES[room]
    first = evaluate_rules(profile, samples, 0)
    evaluate_rules(profile, list(reversed(samples)), 0)
    assert evaluate_rules(profile, samples, 0) == first


def test_chunk_examples():
    assert [len(c) for c in chunk_message(b"x" * 100, 84)] == [84, 16]
    assert chunk_message(b"x" * 84, 84) == [b"x" * 84]
    assert chunk_message(b"", 84) == []
    with pytest.raises(ValueError):
        chunk_message(b"abc", 0)


def test_two_ticks_two_messages_consecutive_seq():
    node = SensorNode(2, RoomId.KITCHEN, seq=255)
    a = node_tick(node, QUIET_ENV, 0)
    b = node_tick(node, QUIET_ENV, 1000)
    assert len(a.frames) == len(b.frames) == 1
    assert (a.frames[0].seq, b.frames[0].seq) == (255, 0)
