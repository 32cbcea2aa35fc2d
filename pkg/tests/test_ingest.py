"""Staging store: registration, scans, deltas, staging, poll loop."""

from __future__ import annotations

import hashlib
import http.server
import json
import os
import threading
import time
from pathlib import Path

import pytest

from minds.errors import DuplicateSourceId, UnreachableSource
from minds.ingest import DeltaSet, SourceDescriptor, StagingStore, run_poll_loop


@pytest.fixture()
def drop(tmp_path: Path) -> Path:
    d = tmp_path / "drop"
    d.mkdir()
    return d


@pytest.fixture()
def store(tmp_path: Path) -> StagingStore:
    return StagingStore(tmp_path / "staging")


def register(store: StagingStore, drop: Path, source_id="gdc_drop", interval=3600.0) -> str:
    return store.register_source(
        SourceDescriptor(source_id=source_id, kind="local_directory", locator=str(drop), poll_interval_s=interval)
    )


def write(drop: Path, name: str, data: bytes) -> Path:
    path = drop / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


# --- registration -----------------------------------------------------------


def test_register_echoes_id(store, drop):
    assert register(store, drop) == "gdc_drop"
    assert "gdc_drop" in store.sources()


def test_register_is_idempotent(store, drop):
    register(store, drop)
    register(store, drop)
    assert len(store.sources()) == 1


def test_register_conflicting_locator_rejected(store, drop, tmp_path):
    register(store, drop)
    other = tmp_path / "other"
    other.mkdir()
    with pytest.raises(DuplicateSourceId):
        register(store, other)


def test_register_unreachable_directory(store, tmp_path):
    with pytest.raises(UnreachableSource):
        store.register_source(
            SourceDescriptor(source_id="x", kind="local_directory", locator=str(tmp_path / "nope"))
        )


def test_poll_interval_must_be_positive():
    with pytest.raises(ValueError):
        SourceDescriptor(source_id="x", kind="local_directory", locator=".", poll_interval_s=0)


# --- scanning ----------------------------------------------------------------


def test_scan_filters_extensions_and_sorts(store, drop):
    register(store, drop)
    write(drop, "b_cases.json", b"{}")
    write(drop, "a_samples.tsv", b"sample_id\n")
    write(drop, "sub/c_more.json", b"[]")
    write(drop, "notes.txt", b"ignore me")
    write(drop, "extra.csv", b"ignore,me")
    scan = store.scan_source("gdc_drop")
    assert [e.relative_path for e in scan.entries] == [
        "a_samples.tsv",
        "b_cases.json",
        "sub/c_more.json",
    ]
    assert scan.errors == []


def test_scan_empty_directory(store, drop):
    register(store, drop)
    assert store.scan_source("gdc_drop").entries == []


def test_same_mtime_different_content_yields_different_digests(store, drop):
    """Oracle: independent sha256 of the two byte strings."""
    before, after = b'{"case_id": "a"}', b'{"case_id": "b"}'
    expected = (hashlib.sha256(before).hexdigest(), hashlib.sha256(after).hexdigest())
    assert expected[0] != expected[1]

    register(store, drop)
    path = write(drop, "cases.json", before)
    frozen = (1_700_000_000, 1_700_000_000)
    os.utime(path, frozen)
    first = store.scan_source("gdc_drop").entries[0]
    path.write_bytes(after)
    os.utime(path, frozen)
    second = store.scan_source("gdc_drop").entries[0]

    assert first.modified_at == second.modified_at
    assert (first.digest, second.digest) == expected


# --- deltas -------------------------------------------------------------------


def stage_all(store, source_id="gdc_drop"):
    scan = store.scan_source(source_id)
    delta = store.compute_delta(source_id, scan.entries)
    return store.stage_delta(source_id, delta)


def test_delta_fixed_point(store, drop):
    register(store, drop)
    write(drop, "cases.json", b"{}")
    stage_all(store)
    scan = store.scan_source("gdc_drop")
    assert store.compute_delta("gdc_drop", scan.entries).is_empty()


def test_delta_new_file(store, drop):
    register(store, drop)
    write(drop, "cases.json", b"{}")
    stage_all(store)
    write(drop, "fresh.json", b"[]")
    delta = store.compute_delta("gdc_drop", store.scan_source("gdc_drop").entries)
    assert [r.relative_path for r in delta.added] == ["fresh.json"]
    assert delta.modified == [] and delta.removed == []


def test_delta_remove_and_modify(store, drop):
    """Oracle: naive set/digest comparison of the two listings."""
    register(store, drop)
    write(drop, "a.json", b"{}")
    write(drop, "b.json", b'{"k": 1}')
    stage_all(store)
    first = {e.relative_path: e.digest for e in store.scan_source("gdc_drop").entries}

    (drop / "a.json").unlink()
    write(drop, "b.json", b'{"k": 2}')
    second_entries = store.scan_source("gdc_drop").entries
    second = {e.relative_path: e.digest for e in second_entries}

    expected_removed = sorted(set(first) - set(second))
    expected_modified = sorted(p for p in set(first) & set(second) if first[p] != second[p])
    assert (expected_removed, expected_modified) == (["a.json"], ["b.json"])

    delta = store.compute_delta("gdc_drop", second_entries)
    assert delta.removed == expected_removed
    assert [r.relative_path for r in delta.modified] == expected_modified
    assert delta.added == []


def test_delta_disjoint_by_path(store, drop):
    register(store, drop)
    write(drop, "a.json", b"{}")
    stage_all(store)
    write(drop, "b.json", b"[]")
    (drop / "a.json").unlink()
    delta = store.compute_delta("gdc_drop", store.scan_source("gdc_drop").entries)
    groups = [
        {r.relative_path for r in delta.added},
        {r.relative_path for r in delta.modified},
        set(delta.removed),
    ]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not (groups[i] & groups[j])


# --- staging --------------------------------------------------------------------


def test_stage_empty_delta(store, drop):
    register(store, drop)
    result = store.stage_delta("gdc_drop", DeltaSet([], [], [], None))
    assert result.records == [] and result.bytes_written == 0


def test_stage_size_conservation(store, drop):
    register(store, drop)
    payload = os.urandom(1024).hex()[:1024].encode()  # 1,024 distinct bytes
    write(drop, "one.json", payload)
    result = stage_all(store)
    assert len(result.records) == 1
    assert result.records[0].size == 1024
    assert result.bytes_written == 1024


def test_restaging_same_delta_writes_zero_bytes(store, drop):
    register(store, drop)
    write(drop, "one.json", b'{"case_id": "x"}')
    scan = store.scan_source("gdc_drop")
    delta = store.compute_delta("gdc_drop", scan.entries)
    first = store.stage_delta("gdc_drop", delta)
    again = store.stage_delta("gdc_drop", delta)
    assert first.bytes_written > 0
    assert again.bytes_written == 0
    assert len(again.records) == 1  # records still reported, content already present


def test_digest_verifiable_by_rehashing(store, drop):
    register(store, drop)
    write(drop, "one.json", b'{"case_id": "x"}')
    write(drop, "two.tsv", b"sample_id\ns1\n")
    result = stage_all(store)
    for record in result.records:
        blob = store.read_blob(record.digest)
        assert hashlib.sha256(blob).hexdigest() == record.digest


def test_removed_paths_tombstoned_but_blobs_kept(store, drop):
    register(store, drop)
    write(drop, "gone.json", b"{}")
    result = stage_all(store)
    digest = result.records[0].digest
    (drop / "gone.json").unlink()
    stage_all(store)
    assert store.live_index("gdc_drop") == {}
    assert store.read_index("gdc_drop")["gone.json"]["tombstone"] is True
    assert store.blob_path(digest).exists()


def test_tombstoned_path_can_return(store, drop):
    register(store, drop)
    write(drop, "back.json", b"{}")
    stage_all(store)
    (drop / "back.json").unlink()
    stage_all(store)
    write(drop, "back.json", b"[]")
    delta = store.compute_delta("gdc_drop", store.scan_source("gdc_drop").entries)
    assert [r.relative_path for r in delta.added] == ["back.json"]
    stage_all(store)
    assert store.live_index("gdc_drop")["back.json"]["tombstone"] is False


def test_noop_cycles_do_not_change_store(store, drop):
    register(store, drop)
    write(drop, "a.json", b"{}")
    stage_all(store)
    snapshot = store.read_index("gdc_drop")
    for _ in range(3):
        stage_all(store)
    assert store.read_index("gdc_drop") == snapshot
    write(drop, "b.json", b"[]")
    stage_all(store)
    assert set(store.live_index("gdc_drop")) == {"a.json", "b.json"}


# --- poll loop --------------------------------------------------------------------


def run_loop_briefly(store, trigger, duration_s: float):
    stop = threading.Event()
    thread = threading.Thread(
        target=run_poll_loop, args=(store, trigger, stop), kwargs={"tick_s": 0.01}
    )
    thread.start()
    time.sleep(duration_s)
    stop.set()
    thread.join(timeout=5)
    assert not thread.is_alive()


def test_poll_loop_requires_sources(store):
    with pytest.raises(UnreachableSource):
        run_poll_loop(store, lambda *a: None, threading.Event())


def test_poll_loop_quiet_when_nothing_changes(store, drop):
    register(store, drop, interval=0.05)
    write(drop, "a.json", b"{}")
    stage_all(store)
    calls = []
    run_loop_briefly(store, lambda *args: calls.append(args), 0.3)
    assert calls == []


def test_poll_loop_triggers_once_per_change(store, drop):
    register(store, drop, interval=0.05)
    calls = []
    lock = threading.Lock()

    def trigger(source_id, delta, records):
        with lock:
            calls.append((source_id, [r.relative_path for r in records]))

    write(drop, "a.json", b"{}")
    run_loop_briefly(store, trigger, 0.5)
    assert calls == [("gdc_drop", ["a.json"])]


def test_poll_loop_isolates_unreachable_source(store, drop, tmp_path):
    register(store, drop, interval=0.05)
    vanishing = tmp_path / "vanishing"
    vanishing.mkdir()
    store.register_source(
        SourceDescriptor(
            source_id="flaky", kind="local_directory", locator=str(vanishing), poll_interval_s=0.05
        )
    )
    vanishing.rmdir()  # becomes unreachable after registration

    calls = []
    lock = threading.Lock()

    def trigger(source_id, delta, records):
        with lock:
            calls.append(source_id)

    write(drop, "a.json", b"{}")
    run_loop_briefly(store, trigger, 0.5)
    assert calls == ["gdc_drop"]


# --- http sources --------------------------------------------------------------------


class _ListingHandler(http.server.BaseHTTPRequestHandler):
    corpus: dict[str, bytes] = {}

    def log_message(self, *args):
        pass

    def do_GET(self):
        if self.path in ("/", ""):
            listing = {
                "files": [
                    {"relative_path": name, "size": len(data)}
                    for name, data in sorted(self.corpus.items())
                ]
            }
            body = json.dumps(listing).encode()
        else:
            name = self.path.lstrip("/")
            if name not in self.corpus:
                self.send_error(404)
                return
            body = self.corpus[name]
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


@pytest.fixture()
def http_source():
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _ListingHandler)
    _ListingHandler.corpus = {"cases.json": b'{"case_id": "h1"}', "skip.txt": b"no"}
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_http_source_scan_and_stage(store, http_source):
    store.register_source(
        SourceDescriptor(source_id="remote", kind="http_endpoint", locator=http_source)
    )
    scan = store.scan_source("remote")
    assert [e.relative_path for e in scan.entries] == ["cases.json"]
    delta = store.compute_delta("remote", scan.entries)
    result = store.stage_delta("remote", delta)
    assert result.bytes_written == len(b'{"case_id": "h1"}')
    assert store.read_blob(result.records[0].digest) == b'{"case_id": "h1"}'


def test_http_source_unreachable(store):
    with pytest.raises(UnreachableSource):
        store.register_source(
            SourceDescriptor(source_id="dead", kind="http_endpoint", locator="http://127.0.0.1:1")
        )
