"""Record storage and the room/field time-series query surface.

Backends share one contract: ``insert_batch`` is idempotent per batch id and
``query`` returns records for one (room, field) with timestamps in an
inclusive range, ascending.

LocalStore layout (one directory)::

    <room>.jsonl    one record per line, keys in order:
                    batch_id, i, timestamp, room, field, value, src, seq
    batches.jsonl   one commit line per stored batch: {"batch_id": .., "count": ..}

Record lines only become visible once their batch's commit line exists, so a
crash mid-batch leaves nothing half-applied; the batch is simply retried.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from abc import ABC, abstractmethod
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable

from .gateway import SensorRecord
from .nodes import ROOM_FIELDS, RoomId, UnknownField, UnknownRoom

log = logging.getLogger(__name__)

STORE_URL_ENV = "WSN_STORE_URL"
BATCH_LOG = "batches.jsonl"


class StoreError(Exception):
    pass


class StoreUnavailable(StoreError):
    pass


def check_room(room: str) -> RoomId:
    try:
        return RoomId(room)
    except ValueError:
        raise UnknownRoom(f"unknown room {room!r}") from None


def check_field(room: str, field: str) -> None:
    if field not in ROOM_FIELDS[check_room(room)]:
        raise UnknownField(f"{room} has no field {field!r}")


def check_range(from_ts: int, to_ts: int) -> None:
    if from_ts > to_ts:
        raise ValueError(f"from_ts {from_ts} is after to_ts {to_ts}")


class StorageBackend(ABC):
    @abstractmethod
    def insert_batch(self, records: list[SensorRecord], batch_id: str) -> int: ...

    @abstractmethod
    def query(self, room: str, field: str, from_ts: int, to_ts: int) -> list[SensorRecord]: ...

    @abstractmethod
    def list_rooms(self) -> list[str]: ...

    @abstractmethod
    def list_fields(self, room: str) -> list[str]: ...

    def refresh(self) -> None:
        """Pick up writes made by other processes. No-op unless the backend caches."""


class MemoryStore(StorageBackend):
    def __init__(self):
        self._lock = threading.RLock()
        self._index: dict[str, dict[str, list[tuple[int, int, SensorRecord]]]] = {}
        self._batches: set[str] = set()
        self._counter = 0

    def __len__(self):
        with self._lock:
            return sum(len(rows) for fields in self._index.values() for rows in fields.values())

    def has_batch(self, batch_id: str) -> bool:
        with self._lock:
            return batch_id in self._batches

    def insert_batch(self, records: list[SensorRecord], batch_id: str) -> int:
        records = list(records)
        for r in records:
            check_field(r.room, r.field)
        with self._lock:
            if batch_id in self._batches:
                return 0
            self._persist(records, batch_id)
            self._apply(records, batch_id)
            return len(records)

    def _persist(self, records: list[SensorRecord], batch_id: str) -> None:
        pass

    def _apply(self, records: Iterable[SensorRecord], batch_id: str) -> None:
        self._batches.add(batch_id)
        for r in records:
            rows = self._index.setdefault(r.room, {}).setdefault(r.field, [])
            key = (r.timestamp, self._counter, r)
            self._counter += 1
            if not rows or rows[-1][:2] <= key[:2]:
                rows.append(key)
            else:
                bisect.insort(rows, key, key=lambda k: k[:2])

    def query(self, room: str, field: str, from_ts: int, to_ts: int) -> list[SensorRecord]:
        check_field(room, field)
        check_range(from_ts, to_ts)
        with self._lock:
            rows = self._index.get(room, {}).get(field, [])
            lo = bisect.bisect_left(rows, from_ts, key=lambda k: k[0])
            hi = bisect.bisect_right(rows, to_ts, key=lambda k: k[0])
            return [k[2] for k in rows[lo:hi]]

    def list_rooms(self) -> list[str]:
        with self._lock:
            return sorted(r for r, fields in self._index.items() if any(fields.values()))

    def list_fields(self, room: str) -> list[str]:
        check_room(room)
        with self._lock:
            return sorted(f for f, rows in self._index.get(room, {}).items() if rows)

    def all_records(self) -> list[SensorRecord]:
        with self._lock:
            return [k[2] for room in sorted(self._index) for f in sorted(self._index[room])
                    for k in self._index[room][f]]


class LocalStore(MemoryStore):
    """Append-only JSON-Lines files, one per room, replayed into memory on open."""

    def __init__(self, directory: str | Path, *, fsync: bool = False):
        super().__init__()
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._offsets: dict[str, int] = {}
        self._staged: dict[str, list[dict]] = {}
        self.refresh()

    def _append(self, name: str, lines: list[str]) -> None:
        path = self.directory / name
        with open(path, "a", encoding="utf-8") as f:
            f.write("".join(lines))
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        # Our own writes are already applied; skip them on the next refresh.
        self._offsets[name] = path.stat().st_size

    def insert_batch(self, records: list[SensorRecord], batch_id: str) -> int:
        with self._lock:
            self.refresh()
            return super().insert_batch(records, batch_id)

    def _persist(self, records: list[SensorRecord], batch_id: str) -> None:
        by_room: dict[str, list[str]] = {}
        for i, r in enumerate(records):
            line = {"batch_id": batch_id, "i": i, "timestamp": r.timestamp, "room": r.room,
                    "field": r.field, "value": r.value, "src": r.src, "seq": r.seq}
            by_room.setdefault(r.room, []).append(json.dumps(line) + "\n")
        for room in sorted(by_room):
            self._append(f"{room}.jsonl", by_room[room])
        self._append(BATCH_LOG, [json.dumps({"batch_id": batch_id, "count": len(records)}) + "\n"])

    def _read_new(self, name: str) -> list[dict]:
        path = self.directory / name
        if not path.exists():
            return []
        start = self._offsets.get(name, 0)
        with open(path, "rb") as f:
            f.seek(start)
            data = f.read()
        end = data.rfind(b"\n") + 1  # leave a torn trailing line for later
        self._offsets[name] = start + end
        out = []
        for raw in data[:end].splitlines():
            if not raw.strip():
                continue
            try:
                out.append(json.loads(raw))
            except json.JSONDecodeError:
                log.warning("skipping corrupt line in %s", name)
        return out

    def refresh(self) -> None:
        with self._lock:
            for room in RoomId:
                for line in self._read_new(f"{room.value}.jsonl"):
                    self._staged.setdefault(line["batch_id"], []).append(line)
            for commit in self._read_new(BATCH_LOG):
                bid = commit["batch_id"]
                lines = self._staged.pop(bid, [])
                if bid in self._batches:
                    continue
                first = {}
                for line in lines:
                    first.setdefault(line["i"], line)
                self._apply([SensorRecord.from_dict(first[i]) for i in sorted(first)], bid)


class RemoteStoreClient(StorageBackend):
    """JSON-over-HTTP client with exponential-backoff retry.

    Protocol::

        POST /batches  {"batch_id": str, "records": [record, ...]} -> {"inserted": n}
        GET  /records?room=&field=&from=&to=                      -> {"records": [...]}
        GET  /rooms                                                -> [room, ...]
        GET  /rooms/<room>/fields                                  -> [field, ...]

    Errors come back as ``{"error": kind, "detail": str}`` with 400/404/5xx.
    """

    def __init__(self, base_url: str, *, timeout_ms: int = 2000, max_retries: int = 3,
                 backoff_base: float = 0.05, sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.delays: list[float] = []

    def _request(self, method: str, path: str, body=None):
        data = None if body is None else json.dumps(body).encode()
        url = self.base_url + path
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff_base * 2 ** (attempt - 1)
                self.delays.append(delay)
                self.sleep(delay)
            req = urllib.request.Request(url, data=data, method=method,
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_ms / 1000) as resp:
                    return json.loads(resp.read() or b"null")
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    self._raise_client_error(exc)
                last = exc
            except (urllib.error.URLError, OSError) as exc:
                last = exc
        raise StoreUnavailable(f"{method} {url} failed after {self.max_retries + 1} attempts: {last}")

    @staticmethod
    def _raise_client_error(exc: urllib.error.HTTPError):
        try:
            err = json.loads(exc.read())
        except (ValueError, OSError):
            err = {}
        kind, detail = err.get("error"), err.get("detail", str(exc))
        if kind == "unknown_room":
            raise UnknownRoom(detail)
        if kind == "unknown_field":
            raise UnknownField(detail)
        raise StoreError(f"HTTP {exc.code}: {detail}")

    def insert_batch(self, records: list[SensorRecord], batch_id: str) -> int:
        body = {"batch_id": batch_id, "records": [r.as_dict() for r in records]}
        return int(self._request("POST", "/batches", body)["inserted"])

    def query(self, room: str, field: str, from_ts: int, to_ts: int) -> list[SensorRecord]:
        check_range(from_ts, to_ts)
        qs = urllib.parse.urlencode({"room": room, "field": field, "from": from_ts, "to": to_ts})
        return [SensorRecord.from_dict(d) for d in self._request("GET", f"/records?{qs}")["records"]]

    def list_rooms(self) -> list[str]:
        return self._request("GET", "/rooms")

    def list_fields(self, room: str) -> list[str]:
        return self._request("GET", f"/rooms/{urllib.parse.quote(room)}/fields")


# -- HTTP servers -------------------------------------------------------------

class _JSONHandler(BaseHTTPRequestHandler):
    server_version = "homewsn/0.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, kind: str, detail: str) -> None:
        self._send(status, {"error": kind, "detail": detail})

    def _dispatch(self, fn) -> None:
        try:
            fn()
        except UnknownRoom as exc:
            self._error(404, "unknown_room", str(exc))
        except UnknownField as exc:
            self._error(404, "unknown_field", str(exc))
        except (ValueError, KeyError) as exc:
            self._error(400, "bad_request", str(exc))

    @property
    def backend(self) -> StorageBackend:
        return self.server.backend

    def _route_common(self, parts: list[str]) -> bool:
        if parts == ["rooms"]:
            self._send(200, self.backend.list_rooms())
            return True
        if len(parts) == 3 and parts[0] == "rooms" and parts[2] == "fields":
            self._send(200, self.backend.list_fields(urllib.parse.unquote(parts[1])))
            return True
        return False

    @staticmethod
    def _range_params(query: str) -> tuple[str, str, int, int]:
        q = urllib.parse.parse_qs(query, strict_parsing=False)
        missing = [k for k in ("room", "field", "from", "to") if k not in q]
        if missing:
            raise ValueError(f"missing query parameters: {missing}")
        try:
            from_ts, to_ts = int(q["from"][0]), int(q["to"][0])
        except ValueError:
            raise ValueError("from/to must be integer milliseconds") from None
        check_range(from_ts, to_ts)
        return q["room"][0], q["field"][0], from_ts, to_ts


class _QueryHandler(_JSONHandler):
    def do_GET(self):
        self._dispatch(self._get)

    def _get(self):
        url = urllib.parse.urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        self.backend.refresh()
        if self._route_common(parts):
            return
        if parts == ["series"]:
            room, field, lo, hi = self._range_params(url.query)
            rows = self.backend.query(room, field, lo, hi)
            self._send(200, [{"timestamp": r.timestamp, "value": r.value} for r in rows])
            return
        self._error(404, "not_found", self.path)


class _MockStoreHandler(_JSONHandler):
    def do_GET(self):
        if self.server.take_failure():
            self._error(503, "unavailable", "injected failure")
            return
        self._dispatch(self._get)

    def do_POST(self):
        if self.server.take_failure():
            self._error(503, "unavailable", "injected failure")
            return
        self._dispatch(self._post)

    def _get(self):
        url = urllib.parse.urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        if self._route_common(parts):
            return
        if parts == ["records"]:
            room, field, lo, hi = self._range_params(url.query)
            self._send(200, {"records": [r.as_dict() for r in self.backend.query(room, field, lo, hi)]})
            return
        self._error(404, "not_found", self.path)

    def _post(self):
        if urllib.parse.urlsplit(self.path).path.rstrip("/") != "/batches":
            self._error(404, "not_found", self.path)
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length))
            records = [SensorRecord.from_dict(d) for d in body["records"]]
            batch_id = str(body["batch_id"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed batch: {exc}") from None
        self._send(200, {"inserted": self.backend.insert_batch(records, batch_id)})


class _BackgroundServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, backend: StorageBackend, bind: tuple[str, int], handler):
        super().__init__(bind, handler)
        self.backend = backend
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class MockRemoteServer(_BackgroundServer):
    """In-process reference server for the remote store protocol, with failure injection."""

    def __init__(self, bind: tuple[str, int] = ("127.0.0.1", 0), backend: MemoryStore | None = None):
        super().__init__(backend or MemoryStore(), bind, _MockStoreHandler)
        self._fail_lock = threading.Lock()
        self._failures = 0
        self.requests_failed = 0

    def fail_next(self, n: int) -> None:
        with self._fail_lock:
            self._failures = n

    def take_failure(self) -> bool:
        with self._fail_lock:
            if self._failures > 0:
                self._failures -= 1
                self.requests_failed += 1
                return True
            return False


class QueryServer(_BackgroundServer):
    def __init__(self, backend: StorageBackend, bind: tuple[str, int]):
        super().__init__(backend, bind, _QueryHandler)


def parse_bind(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"bind address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def serve(backend: StorageBackend, bind_addr: str | tuple[str, int] = "127.0.0.1:8080") -> QueryServer:
    """Build the read-only query server; call ``.start()`` or ``.serve_forever()``."""
    bind = parse_bind(bind_addr) if isinstance(bind_addr, str) else bind_addr
    return QueryServer(backend, bind)


# -- operations ---------------------------------------------------------------

def insert_batch(backend: StorageBackend, records: list[SensorRecord], batch_id: str) -> int:
    return backend.insert_batch(records, batch_id)


def query(backend: StorageBackend, room: str, field: str, from_ts: int, to_ts: int) -> list[SensorRecord]:
    return backend.query(room, field, from_ts, to_ts)


def list_rooms(backend: StorageBackend) -> list[str]:
    return backend.list_rooms()


def list_fields(backend: StorageBackend, room: str) -> list[str]:
    return backend.list_fields(room)


def export(backend: StorageBackend, room: str, field: str, from_ts: int, to_ts: int,
           fmt: str = "csv", out: str | Path | None = None) -> str:
    rows = backend.query(room, field, from_ts, to_ts)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp", "value"])
        for r in rows:
            w.writerow([r.timestamp, r.value])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps([{"timestamp": r.timestamp, "value": r.value} for r in rows], indent=1) + "\n"
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    if out is not None:
        Path(out).write_text(text)
    return text


def backend_from_env(directory: str | Path | None = None) -> StorageBackend:
    url = os.environ.get(STORE_URL_ENV)
    if url:
        return RemoteStoreClient(url)
    if directory is None:
        raise StoreError(f"no store directory given and {STORE_URL_ENV} is not set")
    return LocalStore(directory)
