"""Battery accounting, duty cycling and first-node-death lifetime."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

MS_PER_HOUR = 3_600_000.0


class NodeDead(Exception):
    pass


class State(str, enum.Enum):
    TX = "tx"
    RX_IDLE = "rx_idle"
    SLEEP = "sleep"
    MCU_ACTIVE = "mcu_active"


@dataclass(frozen=True)
class EnergyModel:
    voltage: float = 3.3
    current_tx: float = 45.0
    current_rx_idle: float = 31.0
    current_sleep: float = 0.001
    current_mcu_active: float = 10.0

    def __post_init__(self):
        if self.voltage <= 0:
            raise ValueError("voltage must be > 0")
        for name in ("current_tx", "current_rx_idle", "current_sleep", "current_mcu_active"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def current(self, state: State | str) -> float:
        """Draw in mA for one component state."""
        state = State(state)
        return {
            State.TX: self.current_tx,
            State.RX_IDLE: self.current_rx_idle,
            State.SLEEP: self.current_sleep,
            State.MCU_ACTIVE: self.current_mcu_active,
        }[state]

    def joules(self, mah: float) -> float:
        return mah * 3600.0 * self.voltage / 1000.0


@dataclass
class BatteryState:
    capacity: float
    consumed: float = 0.0
    history: list[tuple[State, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.capacity > 0:
            raise ValueError("capacity must be > 0")

    @property
    def dead(self) -> bool:
        return self.consumed >= self.capacity

    @property
    def remaining(self) -> float:
        return self.capacity - self.consumed


def charge(model: EnergyModel, state: State | str, duration: float) -> float:
    """mAh drawn in ``state`` over ``duration`` ms."""
    return model.current(state) * duration / MS_PER_HOUR


def account(battery: BatteryState, state: State | str, duration: float, model: EnergyModel) -> BatteryState:
    """Integrate one segment into the battery.

    A segment that would overdraw the battery is cut short at exhaustion and
    recorded with the shortened duration, so history always sums to ``consumed``.
    """
    if battery.dead:
        raise NodeDead("battery exhausted")
    if duration < 0:
        raise ValueError("negative duration")
    state = State(state)
    if duration == 0:
        return battery
    q = charge(model, state, duration)
    if q >= battery.remaining:
        duration = battery.remaining / model.current(state) * MS_PER_HOUR
        q = battery.remaining
    battery.consumed = min(battery.consumed + q, battery.capacity)
    battery.history.append((state, duration))
    return battery


@dataclass(frozen=True)
class DutyCycle:
    mode: str = "always_on"
    awake_window: int = 100
    period: int = 1000

    def __post_init__(self):
        if self.mode not in ("always_on", "duty_cycled"):
            raise ValueError(f"unknown duty-cycle mode {self.mode!r}")
        if not 0 < self.awake_window <= self.period:
            raise ValueError("need 0 < awake_window <= period")

    @property
    def awake_fraction(self) -> float:
        return 1.0 if self.mode == "always_on" else self.awake_window / self.period


ALWAYS_ON = DutyCycle("always_on")


def period_timeline(period: float, tx_ms: float, rx_ms: float, duty: DutyCycle) -> list[tuple[State, float, bool]]:
    """Sequential radio segments for one interval as (radio state, ms, mcu awake).

    Receiving draws the same current as idle listening. The awake share grows
    if the interval's traffic does not fit in it.
    """
    awake = max(period * duty.awake_fraction, min(period, tx_ms + rx_ms))
    tx_ms = min(tx_ms, awake)
    out = [(State.TX, tx_ms, True), (State.RX_IDLE, awake - tx_ms, True)]
    if period > awake:
        out.append((State.SLEEP, period - awake, False))
    return [seg for seg in out if seg[1] > 0]


def timeline_charge(timeline, model: EnergyModel) -> float:
    return sum((model.current(s) + (model.current_mcu_active if mcu else 0.0)) * ms
               for s, ms, mcu in timeline) / MS_PER_HOUR


def drain(battery: BatteryState, timeline, model: EnergyModel, start: float) -> float | None:
    """Account a timeline; return the exhaustion time if the battery dies inside it."""
    t = start
    for state, ms, mcu in timeline:
        rate = model.current(state) + (model.current_mcu_active if mcu else 0.0)
        if rate > 0 and rate * ms / MS_PER_HOUR >= battery.remaining:
            ms = battery.remaining / rate * MS_PER_HOUR
            account(battery, state, ms, model)
            if mcu and not battery.dead:
                account(battery, State.MCU_ACTIVE, ms, model)
            # Absorb float residue: the combined draw exhausts the cell here by construction.
            battery.consumed = battery.capacity
            return t + ms
        account(battery, state, ms, model)
        if mcu:
            account(battery, State.MCU_ACTIVE, ms, model)
        t += ms
    return None


def lifetime(scenario, duty: DutyCycle, model: EnergyModel, *, horizon: float | None = None,
             capacity: float | None = None) -> float:
    """Time in ms until the first battery-powered node is exhausted.

    Uses each node's steady per-interval traffic (own frames plus relayed
    frames) from the scenario's network. Whole intervals are handled in closed
    form; only the final partial interval is walked segment by segment.
    Returns ``horizon`` (default: scenario duration) when nobody dies before it.
    """
    from .simulation import steady_traffic

    horizon = scenario.duration if horizon is None else horizon
    capacity = scenario.battery_mah if capacity is None else capacity
    if math.isinf(capacity):
        return horizon
    period = duty.period if duty.mode == "duty_cycled" else scenario.sampling_period
    first = horizon
    for load in steady_traffic(scenario, period).values():
        timeline = period_timeline(load.period, load.tx_ms, load.rx_ms, duty)
        q = timeline_charge(timeline, model)
        if q <= 0:
            continue
        full = math.floor(capacity / q)
        if full * q >= capacity:
            full -= 1
        battery = BatteryState(capacity, consumed=full * q)
        died = drain(battery, timeline, model, full * load.period)
        if died is None:
            # Float residue left a sliver of charge; it dies at the end of the next interval.
            died = (full + 1) * load.period
        first = min(first, died)
    return first


def energy_report(batteries: dict[int, BatteryState], model: EnergyModel, *,
                  duration: float, deaths: dict[int, float] | None = None) -> dict:
    """Per-node charge and energy recomputed from segment history, plus first-node-death lifetime."""
    deaths = deaths or {}
    nodes = {}
    for addr in sorted(batteries):
        b = batteries[addr]
        mah = math.fsum(model.current(s) * d for s, d in b.history) / MS_PER_HOUR
        by_state = {}
        for s, d in b.history:
            by_state[s.value] = by_state.get(s.value, 0.0) + d
        nodes[str(addr)] = {
            "consumed_mah": mah,
            "joules": model.joules(mah),
            "capacity_mah": b.capacity,
            "state_ms": {k: by_state[k] for k in sorted(by_state)},
            "died_at_ms": deaths.get(addr),
        }
    lifetime_ms = min(deaths.values()) if deaths else duration
    return {"nodes": nodes, "network_lifetime_ms": lifetime_ms}
