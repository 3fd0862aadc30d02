import csv
import io
import json
import random
import urllib.error
import urllib.request

import pytest
from hypothesis import given, settings, strategies as st

from homewsn.gateway import SensorRecord
from homewsn.nodes import ROOM_FIELDS, RoomId, UnknownField, UnknownRoom
from homewsn.store import (
    STORE_URL_ENV, LocalStore, MemoryStore, MockRemoteServer, RemoteStoreClient, StoreError,
    StoreUnavailable, backend_from_env, export, insert_batch, list_fields, list_rooms, query, serve,
)

PAIRS = [(r.value, f) for r in RoomId for f in ROOM_FIELDS[r]]


def rec(t, room="kitchen", field="gas", value=None, src=1):
    return SensorRecord(room, field, t if value is None else value, t, src)


def random_records(rng, n, t_max=10_000):
    out = []
    for _ in range(n):
        room, field = rng.choice(PAIRS)
        out.append(SensorRecord(room, field, rng.randint(0, 1023), rng.randint(0, t_max), rng.randint(1, 9)))
    return out


def oracle(records, room, field, lo, hi):
    hits = [(r.timestamp, i, r) for i, r in enumerate(records)
            if r.room == room and r.field == field and lo <= r.timestamp <= hi]
    return [r for _, _, r in sorted(hits, key=lambda x: x[:2])]


@pytest.fixture(params=["memory", "local"])
def store(request, tmp_path):
    return MemoryStore() if request.param == "memory" else LocalStore(tmp_path / "db")


def test_insert_and_idempotent_resend(store):
    batch = [rec(1), rec(2), rec(3)]
    assert insert_batch(store, batch, "b1") == 3
    assert insert_batch(store, batch, "b1") == 0
    assert len(store) == 3


def test_range_query(store):
    insert_batch(store, [rec(3), rec(1), rec(2)], "b")
    assert [r.timestamp for r in query(store, "kitchen", "gas", 2, 3)] == [2, 3]
    assert query(store, "kitchen", "gas", 4, 100) == []
    with pytest.raises(ValueError):
        query(store, "kitchen", "gas", 5, 1)


def test_listing(store):
    assert list_rooms(store) == []
    insert_batch(store, [rec(1, field="flame"), rec(1)], "b")
    assert list_rooms(store) == ["kitchen"]
    assert list_fields(store, "kitchen") == ["flame", "gas"]
    insert_batch(store, [rec(1, room=r, field=ROOM_FIELDS[RoomId(r)][0]) for r in
                         ("living_room", "porch", "terrace_garden")], "b2")
    assert list_rooms(store) == sorted(r.value for r in RoomId)
    with pytest.raises(UnknownRoom):
        list_fields(store, "bathroom")


def test_unknown_names_rejected(store):
    with pytest.raises(UnknownRoom):
        insert_batch(store, [rec(1, room="garage")], "b")
    with pytest.raises(UnknownField):
        query(store, "kitchen", "sound", 0, 1)


def test_query_oracle_10k(store):
    rng = random.Random(10_000)
    records = random_records(rng, 10_000)
    for i in range(0, len(records), 250):
        insert_batch(store, records[i:i + 250], f"b{i}")
    for _ in range(200):
        room, field = rng.choice(PAIRS)
        lo = rng.randint(0, 10_000)
        hi = rng.randint(lo, 10_000)
        assert query(store, room, field, lo, hi) == oracle(records, room, field, lo, hi)


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3)), max_size=40))
def test_idempotent_under_retry_interleavings(sends):
    batches = {i: [rec(i * 10 + k) for k in range(i + 1)] for i in range(6)}
    store = MemoryStore()
    for bid, _repeat in sends:
        insert_batch(store, batches[bid], f"b{bid}")
    assert len(store) == sum(len(batches[b]) for b in {b for b, _ in sends})


# -- LocalStore durability ----------------------------------------------------

def test_reopen_replays_identically(tmp_path):
    rng = random.Random(3)
    records = random_records(rng, 2000)
    a = LocalStore(tmp_path)
    for i in range(0, 2000, 100):
        a.insert_batch(records[i:i + 100], f"b{i}")
    b = LocalStore(tmp_path)
    assert b.all_records() == a.all_records()
    for room, field in PAIRS:
        assert b.query(room, field, 0, 10_000) == a.query(room, field, 0, 10_000)
    assert b.insert_batch(records[:100], "b0") == 0


def test_uncommitted_lines_invisible_and_torn_tail_ignored(tmp_path):
    a = LocalStore(tmp_path)
    a.insert_batch([rec(1)], "b1")
    line = {"batch_id": "b2", "i": 0, "timestamp": 2, "room": "kitchen", "field": "gas", "value": 2, "src": 1, "seq": 0}
    with open(tmp_path / "kitchen.jsonl", "a") as f:
        f.write(json.dumps(line) + "\n")
        f.write('{"batch_id": "b3", "i"')  # crash mid-write
    b = LocalStore(tmp_path)
    assert [r.timestamp for r in b.query("kitchen", "gas", 0, 10)] == [1]


def test_refresh_sees_other_writer(tmp_path):
    reader = LocalStore(tmp_path)
    LocalStore(tmp_path).insert_batch([rec(5)], "x")
    assert reader.query("kitchen", "gas", 0, 10) == []
    reader.refresh()
    assert [r.timestamp for r in reader.query("kitchen", "gas", 0, 10)] == [5]


# -- remote client + mock server ----------------------------------------------

def test_retry_two_failures_then_success():
    with MockRemoteServer() as server:
        delays = []
        client = RemoteStoreClient(server.url, sleep=delays.append, backoff_base=0.01)
        server.fail_next(2)
        assert client.insert_batch([rec(1), rec(2), rec(3)], "b") == 3
        assert client.delays == delays == [0.01, 0.02]
        assert len(server.backend) == 3


def test_retries_exhausted():
    with MockRemoteServer() as server:
        client = RemoteStoreClient(server.url, sleep=lambda s: None, max_retries=2)
        server.fail_next(5)
        with pytest.raises(StoreUnavailable):
            client.insert_batch([rec(1)], "b")
        assert len(server.backend) == 0


def test_unreachable_server():
    client = RemoteStoreClient("http://127.0.0.1:9", sleep=lambda s: None, max_retries=1, timeout_ms=200)
    with pytest.raises(StoreUnavailable):
        client.list_rooms()


def test_remote_errors_map_to_exceptions():
    with MockRemoteServer() as server:
        client = RemoteStoreClient(server.url, sleep=lambda s: None)
        with pytest.raises(UnknownRoom):
            client.list_fields("bathroom")
        with pytest.raises((UnknownField, StoreError)):
            client.query("kitchen", "sound", 0, 1)


def test_backend_from_env(monkeypatch, tmp_path):
    monkeypatch.delenv(STORE_URL_ENV, raising=False)
    assert isinstance(backend_from_env(tmp_path), LocalStore)
    with pytest.raises(StoreError):
        backend_from_env()
    monkeypatch.setenv(STORE_URL_ENV, "http://127.0.0.1:1")
    assert isinstance(backend_from_env(tmp_path), RemoteStoreClient)


# -- query endpoint -----------------------------------------------------------

def get(url):
    try:
        with urllib.request.urlopen(url, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_http_endpoints(tmp_path):
    store = LocalStore(tmp_path)
    store.insert_batch([rec(0), rec(5, value=44), rec(11)], "b")
    server = serve(store, "127.0.0.1:0").start()
    try:
        assert get(server.url + "/rooms") == (200, ["kitchen"])
        assert get(server.url + "/rooms/kitchen/fields") == (200, ["gas"])
        assert get(server.url + "/series?room=kitchen&field=gas&from=0&to=10") == (
            200, [{"timestamp": 0, "value": 0}, {"timestamp": 5, "value": 44}])
        assert get(server.url + "/rooms/bathroom/fields")[0] == 404
        assert get(server.url + "/series?room=kitchen&field=gas&from=9&to=1")[0] == 400
        assert get(server.url + "/series?room=kitchen&field=gas&from=x&to=1")[0] == 400
        assert get(server.url + "/series?room=kitchen")[0] == 400
        assert get(server.url + "/nope")[0] == 404

        url = server.url + "/series?room=kitchen&field=gas&from=0&to=100"
        before = get(url)[1]
        LocalStore(tmp_path).insert_batch([rec(50)], "other-writer")
        after = get(url)[1]
        assert len(after) == len(before) + 1 and after[-1]["timestamp"] == 50
    finally:
        server.stop()


# -- export -------------------------------------------------------------------

def test_export_csv_and_json(tmp_path):
    store = MemoryStore()
    store.insert_batch([rec(1), rec(2), rec(3, value=7.5)], "b")
    text = export(store, "kitchen", "gas", 0, 10, "csv")
    assert text.splitlines() == ["timestamp,value", "1,1", "2,2", "3,7.5"]
    assert export(store, "kitchen", "gas", 100, 200, "csv") == "timestamp,value\n"
    out = tmp_path / "g.json"
    export(store, "kitchen", "gas", 0, 10, "json", out)
    parsed = json.loads(out.read_text())
    assert [(d["timestamp"], d["value"]) for d in parsed] == [(1, 1), (2, 2), (3, 7.5)]
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [(int(r["timestamp"]), float(r["value"])) for r in rows] == [(1, 1), (2, 2), (3, 7.5)]
    with pytest.raises(ValueError):
        export(store, "kitchen", "gas", 0, 10, "xml")
