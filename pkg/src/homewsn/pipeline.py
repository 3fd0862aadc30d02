"""Data reduction and payload security.

Windowed aggregation, lossless delta/zigzag/varint compression of
two-decimal fixed-point series, and AES-128-GCM payload sealing.

Compressed series layout (all integers LEB128 varints, signed ones zigzag-folded)::

    varint(n)                 number of values, n >= 0
    zigzag(first * 100)       only when n >= 1
    zigzag(delta_i * 100)     n - 1 successive differences
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1
SCALE = 100


class PipelineError(Exception):
    pass


class ValueOutOfRange(PipelineError, ValueError):
    pass


class MalformedEncoding(PipelineError, ValueError):
    pass


class AuthenticationFailed(PipelineError):
    pass


class NonceReuse(PipelineError):
    pass


def to_fixed(value: float) -> int:
    """Scale a two-decimal value to integer hundredths."""
    if isinstance(value, int):
        scaled = value * SCALE
    else:
        if not math.isfinite(value):
            raise ValueOutOfRange(f"non-finite value {value}")
        scaled = round(value * SCALE)
    if not INT64_MIN <= scaled <= INT64_MAX:
        raise ValueOutOfRange(f"{value} does not fit 64-bit fixed point")
    return scaled


def from_fixed(scaled: int) -> float:
    return scaled / SCALE


# -- aggregation --------------------------------------------------------------

@dataclass(frozen=True)
class AggregateWindow:
    window_len: int
    count: int
    min: float
    max: float
    mean: float
    first_ts: int
    last_ts: int
    room: str | None = None
    field: str | None = None

    def as_dict(self) -> dict:
        return {
            "room": self.room, "field": self.field, "window_len": self.window_len,
            "count": self.count, "min": self.min, "max": self.max, "mean": self.mean,
            "first_ts": self.first_ts, "last_ts": self.last_ts,
        }


def aggregate(samples: Sequence[tuple[int, float]], window_len: int, *,
              room: str | None = None, field: str | None = None) -> list[AggregateWindow]:
    """Summarize consecutive non-overlapping windows of up to ``window_len`` samples.

    The mean is computed on exact integer hundredths, so it is the correctly
    rounded mean of the fixed-point values.
    """
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    out = []
    for i in range(0, len(samples), window_len):
        chunk = samples[i:i + window_len]
        scaled = [to_fixed(v) for _, v in chunk]
        out.append(AggregateWindow(
            window_len=window_len,
            count=len(chunk),
            min=from_fixed(min(scaled)),
            max=from_fixed(max(scaled)),
            mean=sum(scaled) / (SCALE * len(chunk)),
            first_ts=chunk[0][0],
            last_ts=chunk[-1][0],
            room=room,
            field=field,
        ))
    return out


class StreamAggregator:
    """Incremental per-(room, field) windowing for the gateway."""

    def __init__(self, window_len: int):
        self.window_len = window_len
        self._pending: dict[tuple[str, str], list[tuple[int, float]]] = {}
        self.windows: list[AggregateWindow] = []

    def add(self, room: str, field_name: str, ts: int, value: float) -> AggregateWindow | None:
        buf = self._pending.setdefault((room, field_name), [])
        buf.append((ts, value))
        if len(buf) < self.window_len:
            return None
        (w,) = aggregate(buf, self.window_len, room=room, field=field_name)
        buf.clear()
        self.windows.append(w)
        return w

    def flush(self) -> list[AggregateWindow]:
        out = []
        for (room, field_name), buf in sorted(self._pending.items()):
            if buf:
                out.extend(aggregate(buf, self.window_len, room=room, field=field_name))
                buf.clear()
        self.windows.extend(out)
        return out


# -- compression --------------------------------------------------------------

def zigzag(n: int) -> int:
    return 2 * n if n >= 0 else -2 * n - 1


def unzigzag(z: int) -> int:
    return z >> 1 if not z & 1 else -((z + 1) >> 1)


def write_varint(n: int, out: bytearray) -> None:
    if n < 0:
        raise ValueError("varint takes non-negative integers")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise MalformedEncoding("varint runs past end of data")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise MalformedEncoding("varint longer than 10 bytes")


@dataclass(frozen=True)
class CompressedSeries:
    count: int
    first: int | None = None  # hundredths
    deltas: tuple[int, ...] = field(default=())  # hundredths

    @property
    def first_value(self) -> float | None:
        return None if self.first is None else from_fixed(self.first)

    def to_bytes(self) -> bytes:
        out = bytearray()
        write_varint(self.count, out)
        if self.count:
            write_varint(zigzag(self.first), out)
            for d in self.deltas:
                write_varint(zigzag(d), out)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> CompressedSeries:
        count, pos = read_varint(data, 0)
        if count == 0:
            if pos != len(data):
                raise MalformedEncoding("trailing bytes after empty series")
            return cls(0)
        z, pos = read_varint(data, pos)
        deltas = []
        for _ in range(count - 1):
            d, pos = read_varint(data, pos)
            deltas.append(unzigzag(d))
        if pos != len(data):
            raise MalformedEncoding(f"{len(data) - pos} trailing bytes")
        return cls(count, unzigzag(z), tuple(deltas))

    def __len__(self):
        return len(self.to_bytes())


def compress(series: Iterable[float]) -> CompressedSeries:
    scaled = [to_fixed(v) for v in series]
    if not scaled:
        return CompressedSeries(0)
    deltas = tuple(b - a for a, b in zip(scaled, scaled[1:]))
    return CompressedSeries(len(scaled), scaled[0], deltas)


def decompress(encoded: CompressedSeries | bytes) -> list[float]:
    if isinstance(encoded, (bytes, bytearray)):
        encoded = CompressedSeries.from_bytes(bytes(encoded))
    if encoded.count == 0:
        return []
    if encoded.first is None or len(encoded.deltas) != encoded.count - 1:
        raise MalformedEncoding(f"expected {encoded.count - 1} deltas, have {len(encoded.deltas)}")
    acc = encoded.first
    out = [from_fixed(acc)]
    for d in encoded.deltas:
        acc += d
        out.append(from_fixed(acc))
    return out


def ascii_size(series: Iterable[float]) -> int:
    """Bytes the same values take as ``field=value;`` tokens in the ASCII message grammar, value part only."""
    return sum(len(f"{v:.2f};") for v in series)


# -- payload encryption -------------------------------------------------------

KEY_BYTES = 16
TAG_BYTES = 16


@dataclass(frozen=True)
class PayloadKey:
    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_BYTES:
            raise ValueError(f"AES-128 key must be 16 bytes, got {len(self.key)}")

    @classmethod
    def from_hex(cls, text: str) -> PayloadKey:
        return cls(bytes.fromhex(text))


def frame_nonce(src: int, seq: int, epoch: int) -> bytes:
    """96-bit GCM nonce from the frame's (src, seq, wrap epoch) counter."""
    return struct.pack(">HBI5x", src, seq, epoch)


def _key_bytes(key) -> bytes:
    return key.key if isinstance(key, PayloadKey) else PayloadKey(bytes(key)).key


def encrypt_payload(plaintext: bytes, key: PayloadKey | bytes, nonce: bytes) -> bytes:
    return AESGCM(_key_bytes(key)).encrypt(nonce, bytes(plaintext), None)


def decrypt_payload(ciphertext: bytes, key: PayloadKey | bytes, nonce: bytes) -> bytes:
    try:
        return AESGCM(_key_bytes(key)).decrypt(nonce, bytes(ciphertext), None)
    except InvalidTag:
        raise AuthenticationFailed("payload failed authentication") from None


class PayloadSealer:
    """Sender-side encryption that refuses to reuse a (src, seq, epoch) nonce."""

    overhead = TAG_BYTES

    def __init__(self, key: PayloadKey):
        self.key = key
        self._aead = AESGCM(key.key)
        self._used: set[bytes] = set()

    def seal(self, plaintext: bytes, src: int, seq: int, epoch: int) -> bytes:
        nonce = frame_nonce(src, seq, epoch)
        if nonce in self._used:
            raise NonceReuse(f"nonce for src={src} seq={seq} epoch={epoch} already used")
        self._used.add(nonce)
        return self._aead.encrypt(nonce, bytes(plaintext), None)


class PayloadOpener:
    """Receiver side. Tracks each sender's wrap epoch; the auth tag settles ambiguity near a wrap."""

    def __init__(self, key: PayloadKey):
        self._aead = AESGCM(key.key)
        self._epoch: dict[int, int] = {}

    def open(self, ciphertext: bytes, src: int, seq: int) -> bytes:
        base = self._epoch.get(src, 0)
        for epoch in (base, base + 1, base - 1):
            if epoch < 0:
                continue
            try:
                plain = self._aead.decrypt(frame_nonce(src, seq, epoch), bytes(ciphertext), None)
            except InvalidTag:
                continue
            if epoch > base:
                self._epoch[src] = epoch
            return plain
        raise AuthenticationFailed(f"frame src={src} seq={seq} failed authentication")
