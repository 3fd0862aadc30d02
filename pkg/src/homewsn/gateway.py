"""Coordinator-side ingest.

Frames arrive at-least-once and possibly out of order. The gateway drops
repeated (src, seq) frames, reassembles message runs, parses the message
grammar, stamps records with the arrival time, raises alerts and queues
batches for storage.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterable

from .medium import Frame
from .nodes import (FIELD_UNITS, PROFILES, GrammarError, RoomId, Unit, UnknownRoom,
                    decode_message, evaluate_rules)
from .pipeline import AuthenticationFailed, PayloadOpener, StreamAggregator

log = logging.getLogger(__name__)

DEDUPE_WINDOW = 64
MESSAGE_START = b"R:"
TERMINATOR = b"\n"
# Longest run the reassembler will chase before giving up on a start frame.
MAX_RUN = 64

DEFAULT_EPSILON = {
    Unit.CELSIUS: 0.5,
    Unit.PERCENT_RH: 2.0,
    Unit.ADC: 10,
    Unit.CENTIMETERS: 5,
    Unit.BOOLEAN: 1,
}


class ReassemblyTimeout(Exception):
    pass


@dataclass(frozen=True)
class SensorRecord:
    room: str
    field: str
    value: float
    timestamp: int
    src: int
    seq: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SensorRecord:
        return cls(d["room"], d["field"], d["value"], int(d["timestamp"]), int(d["src"]), int(d.get("seq", 0)))


THRESHOLD_RULE = "threshold_rule"
CHANGE_DETECTED = "change_detected"


@dataclass(frozen=True)
class Alert:
    kind: str
    room: str
    field: str
    value: float
    timestamp: int
    src: int = 0
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


class ChangeDetector:
    def __init__(self, epsilon: dict[Unit, float] | None = None):
        self.epsilon = dict(DEFAULT_EPSILON)
        self.epsilon.update(epsilon or {})
        if any(e <= 0 for e in self.epsilon.values()):
            raise ValueError("epsilon must be > 0")
        self.last_value: dict[tuple[str, str], float] = {}

    def detect(self, record: SensorRecord) -> Alert | None:
        key = (record.room, record.field)
        prev = self.last_value.get(key)
        self.last_value[key] = record.value
        if prev is None:
            return None
        if abs(record.value - prev) > self.epsilon[FIELD_UNITS[record.field]]:
            return Alert(CHANGE_DETECTED, record.room, record.field, record.value, record.timestamp,
                         record.src, f"{prev} -> {record.value}")
        return None


def detect_change(detector: ChangeDetector, record: SensorRecord) -> Alert | None:
    return detector.detect(record)


def reassemble(frames: Iterable[tuple[int, bytes, float]], *, now: float | None = None,
               timeout: float = 5000) -> bytes | None:
    """Join one run of (seq, payload, arrival) chunks.

    Returns the message once the run is complete, ``None`` while it may still
    complete, and raises ReassemblyTimeout once ``timeout`` ms passed since
    the run's last arrival without completing it.
    """
    by_seq = {seq: (payload, at) for seq, payload, at in frames}
    if not by_seq:
        return None
    starts = [s for s, (p, _) in by_seq.items() if p.startswith(MESSAGE_START)]
    if starts:
        seq = starts[0]
        parts = []
        for _ in range(len(by_seq)):
            if seq not in by_seq:
                break
            payload = by_seq[seq][0]
            parts.append(payload)
            if payload.endswith(TERMINATOR):
                return b"".join(parts)
            seq = (seq + 1) & 0xFF
    last = max(at for _, at in by_seq.values())
    if now is not None and now - last > timeout:
        raise ReassemblyTimeout(f"run incomplete {now - last:.0f} ms after its last chunk")
    return None


class _Window:
    """Per-sender sliding window over the 8-bit sequence space.

    Keeps the highest sequence number seen and which of the ``size`` numbers
    behind it have arrived. Anything further behind is treated as a replay,
    so wrap-around never makes an old duplicate look new.
    """

    def __init__(self, size: int = DEDUPE_WINDOW):
        if not 0 < size < 128:
            raise ValueError("window must be in 1..127")
        self.size = size
        self._high: dict[int, int] = {}
        self._seen: dict[int, set[int]] = {}

    def is_new(self, src: int, seq: int) -> bool:
        if src not in self._high:
            return True
        behind = (self._high[src] - seq) & 0xFF
        if behind < 128:
            return behind < self.size and seq not in self._seen[src]
        return True

    def add(self, src: int, seq: int) -> None:
        if src not in self._high:
            self._high[src] = seq
            self._seen[src] = {seq}
            return
        if (self._high[src] - seq) & 0xFF < 128:
            self._seen[src].add(seq)
            return
        self._high[src] = seq
        self._seen[src] = {s for s in self._seen[src] if (seq - s) & 0xFF < self.size}
        self._seen[src].add(seq)

    def check_and_add(self, src: int, seq: int) -> bool:
        """True if ``seq`` is new for ``src``; records it."""
        if not self.is_new(src, seq):
            return False
        self.add(src, seq)
        return True


class Reassembler:
    def __init__(self, timeout: float = 5000):
        self.timeout = timeout
        self._pending: dict[int, dict[int, tuple[bytes, float]]] = {}
        self.timeouts = 0
        self.discarded_frames = 0

    def push(self, src: int, seq: int, payload: bytes, arrival: float) -> list[tuple[int, bytes]]:
        """Add a chunk; return any (start seq, message) runs it completes."""
        pending = self._pending.setdefault(src, {})
        pending[seq] = (payload, arrival)
        done = []
        for start in sorted(s for s, (p, _) in pending.items() if p.startswith(MESSAGE_START)):
            if start not in pending:
                continue
            run = []
            seq_i = start
            for _ in range(MAX_RUN):
                if seq_i not in pending or (run and pending[seq_i][0].startswith(MESSAGE_START)):
                    run = None
                    break
                run.append(seq_i)
                if pending[seq_i][0].endswith(TERMINATOR):
                    break
                seq_i = (seq_i + 1) & 0xFF
            else:
                run = None
            if run:
                done.append((start, b"".join(pending.pop(s)[0] for s in run)))
        return done

    def expire(self, now: float) -> int:
        """Drop chunks whose run went quiet for longer than the timeout; returns runs dropped."""
        runs = 0
        for src, pending in self._pending.items():
            stale = sorted(s for s, (_, at) in pending.items() if now - at > self.timeout)
            if not stale:
                continue
            # One run per start chunk; headless leftovers count as one more.
            starts = sum(pending[s][0].startswith(MESSAGE_START) for s in stale)
            runs += starts or 1
            for s in stale:
                del pending[s]
            self.discarded_frames += len(stale)
        self.timeouts += runs
        return runs


class Gateway:
    def __init__(self, *, reassembly_timeout: float = 5000, epsilon: dict | None = None,
                 opener: PayloadOpener | None = None, aggregate_window: int = 10):
        self.reassembler = Reassembler(reassembly_timeout)
        self.detector = ChangeDetector(epsilon)
        self.opener = opener
        self.aggregator = StreamAggregator(aggregate_window)
        self._frames_seen = _Window()
        self._messages_seen = _Window()
        self.alerts: list[Alert] = []
        self.outbox: list[SensorRecord] = []
        self.stats = {
            "frames_received": 0,
            "frames_duplicate": 0,
            "frames_rejected": 0,
            "messages_reassembled": 0,
            "messages_duplicate": 0,
            "messages_malformed": 0,
            "messages_unknown_room": 0,
            "records": 0,
        }

    def receive(self, frame: Frame, arrival: float) -> list[SensorRecord]:
        """Feed one delivered frame; returns records from any message it completes."""
        self.stats["frames_received"] += 1
        if not self._frames_seen.is_new(frame.src, frame.seq):
            self.stats["frames_duplicate"] += 1
            return []
        payload = frame.payload
        if frame.encrypted:
            if self.opener is None:
                self.stats["frames_rejected"] += 1
                return []
            try:
                payload = self.opener.open(payload, frame.src, frame.seq)
            except AuthenticationFailed:
                # Forged frames must not move the replay window.
                self.stats["frames_rejected"] += 1
                return []
        self._frames_seen.add(frame.src, frame.seq)
        records = []
        for start, message in self.reassembler.push(frame.src, frame.seq, payload, arrival):
            try:
                records.extend(self.ingest(message, frame.src, arrival, seq=start))
            except (GrammarError, UnknownRoom) as exc:
                log.debug("dropping message from %d: %s", frame.src, exc)
        return records

    def expire(self, now: float) -> int:
        return self.reassembler.expire(now)

    def ingest(self, message: bytes, src: int, arrival_ts: float, *, seq: int | None = None) -> list[SensorRecord]:
        if seq is not None and not self._messages_seen.check_and_add(src, seq):
            self.stats["messages_duplicate"] += 1
            return []
        try:
            room, samples = decode_message(message)
        except UnknownRoom:
            self.stats["messages_unknown_room"] += 1
            raise
        except GrammarError:
            self.stats["messages_malformed"] += 1
            raise
        self.stats["messages_reassembled"] += 1
        ts = int(round(arrival_ts))
        records = [SensorRecord(room.value, s.field, s.value, ts, src, seq or 0) for s in samples]
        self._threshold_alerts(room, samples, ts, src)
        for r in records:
            alert = self.detector.detect(r)
            if alert is not None:
                self.alerts.append(alert)
            self.aggregator.add(r.room, r.field, r.timestamp, r.value)
        self.outbox.extend(records)
        self.stats["records"] += len(records)
        return records

    def _threshold_alerts(self, room: RoomId, samples, ts: int, src: int) -> None:
        profile = PROFILES[room]
        values = {s.field: s.value for s in samples}
        if not all(f in values for f in profile.fields):
            return
        for ev in evaluate_rules(profile, samples, ts):
            rule = profile.rules[ev.rule]
            cond = next(c for c in rule.conditions if c.holds(values[c.field]))
            self.alerts.append(Alert(THRESHOLD_RULE, room.value, cond.field, values[cond.field], ts, src,
                                     f"{rule} -> {ev.actuator.value} {ev.effect.value}"))

    def take_outbox(self) -> list[SensorRecord]:
        out, self.outbox = self.outbox, []
        return out


class Uplink:
    """Ordered batch queue toward a storage backend; failed batches stay queued with their id."""

    def __init__(self, backend, prefix: str = "batch"):
        self.backend = backend
        self.prefix = prefix
        self.queue: deque[tuple[str, list[SensorRecord]]] = deque()
        self._n = 0
        self.stats = {"batches_sent": 0, "batches_failed": 0, "records_inserted": 0}

    def enqueue(self, records: list[SensorRecord]) -> str | None:
        if not records:
            return None
        batch_id = f"{self.prefix}-{self._n:06d}"
        self._n += 1
        self.queue.append((batch_id, records))
        return batch_id

    def flush(self) -> int:
        from .store import StoreUnavailable

        inserted = 0
        while self.queue:
            batch_id, records = self.queue[0]
            try:
                inserted += self.backend.insert_batch(records, batch_id)
            except StoreUnavailable as exc:
                self.stats["batches_failed"] += 1
                log.warning("batch %s not stored yet: %s", batch_id, exc)
                break
            self.queue.popleft()
            self.stats["batches_sent"] += 1
        self.stats["records_inserted"] += inserted
        return inserted
