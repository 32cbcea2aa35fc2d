"""Stage-1 acquisition: source registry, scans, content deltas, staging store.

Change detection is digest-based: a file counts as modified only when its
sha256 changes, regardless of timestamps. The staging store is a plain
directory tree,

    staging/blobs/<digest>            content-addressed payload bytes
    staging/index/<source_id>.tsv     path -> digest index, tombstones included
    staging/sources.json              source registry

so staging the same content twice transfers zero new bytes and removals never
delete blobs (catalog lineage may still reference them).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import httpx

from .errors import DuplicateSourceId, UnreachableSource
from .util import atomic_write_text, epoch_to_iso, sha256_file, sha256_hex, utc_now_iso

log = logging.getLogger(__name__)

ELIGIBLE_SUFFIXES = (".json", ".tsv")
DEFAULT_POLL_INTERVAL_S = 12 * 3600.0

INDEX_COLUMNS = ("relative_path", "digest", "size", "modified_at", "staged_at", "tombstone")


@dataclass(frozen=True)
class SourceDescriptor:
    source_id: str
    kind: str  # local_directory | http_endpoint
    locator: str
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_S
    last_polled_at: str | None = None

    def __post_init__(self):
        if self.kind not in ("local_directory", "http_endpoint"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval must be positive")


@dataclass(frozen=True)
class ScanEntry:
    relative_path: str
    size: int
    modified_at: str
    digest: str


@dataclass
class ScanResult:
    entries: list[ScanEntry]
    errors: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)


@dataclass(frozen=True)
class IngestRecord:
    source_id: str
    relative_path: str
    size: int
    modified_at: str
    digest: str
    staged_at: str | None = None


@dataclass
class DeltaSet:
    added: list[IngestRecord]
    modified: list[IngestRecord]
    removed: list[str]
    since: str | None

    def is_empty(self) -> bool:
        return not (self.added or self.modified or self.removed)

    def change_count(self) -> int:
        return len(self.added) + len(self.modified) + len(self.removed)


@dataclass
class StageResult:
    records: list[IngestRecord]
    bytes_written: int


class StagingStore:
    """Staging-side persistence. One writer per source; readers unrestricted."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.blobs_dir = self.root / "blobs"
        self.index_dir = self.root / "index"
        self._sources_path = self.root / "sources.json"
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _source_lock(self, source_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(source_id, threading.Lock())

    # --- source registry ---------------------------------------------------

    def sources(self) -> dict[str, SourceDescriptor]:
        if not self._sources_path.exists():
            return {}
        raw = json.loads(self._sources_path.read_text("utf-8"))
        return {
            sid: SourceDescriptor(
                source_id=sid,
                kind=entry["kind"],
                locator=entry["locator"],
                poll_interval_s=entry["poll_interval_s"],
                last_polled_at=entry.get("last_polled_at"),
            )
            for sid, entry in raw.items()
        }

    def _write_sources(self, sources: dict[str, SourceDescriptor]) -> None:
        payload = {
            sid: {
                "kind": d.kind,
                "locator": d.locator,
                "poll_interval_s": d.poll_interval_s,
                "last_polled_at": d.last_polled_at,
            }
            for sid, d in sorted(sources.items())
        }
        atomic_write_text(self._sources_path, json.dumps(payload, indent=2) + "\n")

    def register_source(self, desc: SourceDescriptor) -> str:
        """Persist a source. Idempotent on an identical descriptor.

        Raises UnreachableSource if the locator does not answer a probe, and
        DuplicateSourceId when the id is taken by a different kind/locator.
        """
        probe_source(desc)
        sources = self.sources()
        existing = sources.get(desc.source_id)
        if existing is not None and (existing.kind, existing.locator) != (
            desc.kind,
            desc.locator,
        ):
            raise DuplicateSourceId(
                f"source {desc.source_id!r} already registered for {existing.locator!r}"
            )
        if existing is not None:
            desc = replace(desc, last_polled_at=existing.last_polled_at)
        sources[desc.source_id] = desc
        self._write_sources(sources)
        return desc.source_id

    def _require_source(self, source_id: str) -> SourceDescriptor:
        desc = self.sources().get(source_id)
        if desc is None:
            raise UnreachableSource(f"source {source_id!r} is not registered")
        return desc

    def touch_polled(self, source_id: str) -> None:
        sources = self.sources()
        if source_id in sources:
            sources[source_id] = replace(sources[source_id], last_polled_at=utc_now_iso())
            self._write_sources(sources)

    # --- index -------------------------------------------------------------

    def _index_path(self, source_id: str) -> Path:
        return self.index_dir / f"{source_id}.tsv"

    def read_index(self, source_id: str) -> dict[str, dict]:
        """Full index including tombstones, keyed by relative_path."""
        path = self._index_path(source_id)
        if not path.exists():
            return {}
        out: dict[str, dict] = {}
        lines = path.read_text("utf-8").splitlines()
        for line in lines[1:]:
            cols = line.split("\t")
            entry = dict(zip(INDEX_COLUMNS, cols))
            entry["size"] = int(entry["size"])
            entry["tombstone"] = entry["tombstone"] == "1"
            out[entry["relative_path"]] = entry
        return out

    def live_index(self, source_id: str) -> dict[str, dict]:
        return {p: e for p, e in self.read_index(source_id).items() if not e["tombstone"]}

    def _write_index(self, source_id: str, index: dict[str, dict]) -> None:
        lines = ["\t".join(INDEX_COLUMNS)]
        for path in sorted(index):
            e = index[path]
            lines.append(
                "\t".join(
                    [
                        path,
                        e["digest"],
                        str(e["size"]),
                        e["modified_at"],
                        e["staged_at"],
                        "1" if e["tombstone"] else "0",
                    ]
                )
            )
        atomic_write_text(self._index_path(source_id), "\n".join(lines) + "\n")

    # --- blobs ---------------------------------------------------------------

    def blob_path(self, digest: str) -> Path:
        return self.blobs_dir / digest

    def read_blob(self, digest: str) -> bytes:
        return self.blob_path(digest).read_bytes()

    def _write_blob(self, digest: str, data: bytes) -> int:
        """Store bytes under their digest. Returns bytes actually written."""
        path = self.blob_path(digest)
        if path.exists():
            return 0
        from .util import atomic_write_bytes

        atomic_write_bytes(path, data)
        return len(data)

    # --- scan / delta / stage ------------------------------------------------

    def scan_source(self, source_id: str) -> ScanResult:
        """List eligible files (*.json, *.tsv) with fresh digests, sorted by path."""
        desc = self._require_source(source_id)
        if desc.kind == "local_directory":
            result = _scan_local(Path(desc.locator))
        else:
            result = _scan_http(desc.locator)
        result.entries.sort(key=lambda e: e.relative_path)
        return result

    def compute_delta(self, source_id: str, scan: Iterable[ScanEntry]) -> DeltaSet:
        """Diff a scan listing against the live staging index."""
        desc = self._require_source(source_id)
        live = self.live_index(source_id)
        added: list[IngestRecord] = []
        modified: list[IngestRecord] = []
        seen: set[str] = set()
        for entry in scan:
            seen.add(entry.relative_path)
            record = IngestRecord(
                source_id=source_id,
                relative_path=entry.relative_path,
                size=entry.size,
                modified_at=entry.modified_at,
                digest=entry.digest,
            )
            staged = live.get(entry.relative_path)
            if staged is None:
                added.append(record)
            elif staged["digest"] != entry.digest:
                modified.append(record)
        removed = sorted(p for p in live if p not in seen)
        return DeltaSet(added=added, modified=modified, removed=removed, since=desc.last_polled_at)

    def stage_delta(self, source_id: str, delta: DeltaSet) -> StageResult:
        """Copy changed bytes into the blob store and update the index.

        Bytes are fetched fresh from the source, hashed, and stored under
        their digest; a blob that already exists transfers nothing. Removed
        paths are tombstoned, never deleted. Per-file failures are logged and
        skipped; everything staged before a failure stays valid.
        """
        desc = self._require_source(source_id)
        with self._source_lock(source_id):
            index = self.read_index(source_id)
            records: list[IngestRecord] = []
            bytes_written = 0
            for record in delta.added + delta.modified:
                try:
                    data = _fetch_source_file(desc, record.relative_path)
                except OSError as exc:
                    log.warning("staging %s/%s failed: %s", source_id, record.relative_path, exc)
                    continue
                digest = sha256_hex(data)
                bytes_written += self._write_blob(digest, data)
                staged = replace(record, digest=digest, size=len(data), staged_at=utc_now_iso())
                records.append(staged)
                index[staged.relative_path] = {
                    "relative_path": staged.relative_path,
                    "digest": staged.digest,
                    "size": staged.size,
                    "modified_at": staged.modified_at,
                    "staged_at": staged.staged_at,
                    "tombstone": False,
                }
            for path in delta.removed:
                if path in index:
                    index[path]["tombstone"] = True
            self._write_index(source_id, index)
            self.touch_polled(source_id)
            return StageResult(records=records, bytes_written=bytes_written)

    def ingest_once(self, source_id: str) -> tuple[DeltaSet, StageResult]:
        """One scan+delta+stage pass for a source."""
        scan = self.scan_source(source_id)
        for path, reason in scan.errors:
            log.warning("scan error in %s: %s: %s", source_id, path, reason)
        delta = self.compute_delta(source_id, scan.entries)
        result = self.stage_delta(source_id, delta)
        return delta, result


# --- source access ----------------------------------------------------------


def probe_source(desc: SourceDescriptor) -> None:
    if desc.kind == "local_directory":
        if not Path(desc.locator).is_dir():
            raise UnreachableSource(f"directory {desc.locator!r} does not exist")
        return
    try:
        resp = httpx.get(desc.locator, timeout=10.0)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        raise UnreachableSource(f"endpoint {desc.locator!r} not answering: {exc}") from exc


def _scan_local(root: Path) -> ScanResult:
    if not root.is_dir():
        raise UnreachableSource(f"directory {root} does not exist")
    result = ScanResult(entries=[])
    for path in root.rglob("*"):
        if not path.is_file() or path.suffix.lower() not in ELIGIBLE_SUFFIXES:
            continue
        rel = path.relative_to(root).as_posix()
        try:
            stat = path.stat()
            digest = sha256_file(path)
        except OSError as exc:
            result.errors.append((rel, str(exc)))
            continue
        result.entries.append(
            ScanEntry(
                relative_path=rel,
                size=stat.st_size,
                modified_at=epoch_to_iso(stat.st_mtime),
                digest=digest,
            )
        )
    return result


def _scan_http(locator: str) -> ScanResult:
    """Scan an HTTP source: GET <locator> returns {"files": [{relative_path,
    size, modified_at[, digest]}]}; entries without a digest are fetched and
    hashed locally."""
    try:
        resp = httpx.get(locator, timeout=30.0)
        resp.raise_for_status()
        listing = resp.json()
    except (httpx.HTTPError, ValueError) as exc:
        raise UnreachableSource(f"endpoint {locator!r} not answering: {exc}") from exc
    result = ScanResult(entries=[])
    for item in listing.get("files", []):
        rel = item["relative_path"]
        if not rel.lower().endswith(ELIGIBLE_SUFFIXES):
            continue
        digest = item.get("digest")
        size = item.get("size")
        try:
            if not digest:
                data = _http_file(locator, rel)
                digest = sha256_hex(data)
                size = len(data)
        except OSError as exc:
            result.errors.append((rel, str(exc)))
            continue
        result.entries.append(
            ScanEntry(
                relative_path=rel,
                size=int(size),
                modified_at=item.get("modified_at", ""),
                digest=digest,
            )
        )
    return result


def _http_file(locator: str, relative_path: str) -> bytes:
    url = locator.rstrip("/") + "/" + relative_path
    try:
        resp = httpx.get(url, timeout=30.0)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        raise OSError(f"fetch {url} failed: {exc}") from exc
    return resp.content


def _fetch_source_file(desc: SourceDescriptor, relative_path: str) -> bytes:
    if desc.kind == "local_directory":
        return (Path(desc.locator) / relative_path).read_bytes()
    return _http_file(desc.locator, relative_path)


# --- poll loop ----------------------------------------------------------------

TriggerFn = Callable[[str, DeltaSet, list[IngestRecord]], None]


def run_poll_loop(
    store: StagingStore,
    trigger: TriggerFn,
    stop: threading.Event,
    *,
    tick_s: float = 0.25,
    max_workers: int = 4,
) -> None:
    """Cycle all registered sources until ``stop`` is set.

    Each source is scanned no more often than its poll interval, with at most
    one scan per source in flight; intervals are anchored to loop start, not
    wall clock. Non-empty deltas invoke ``trigger(source_id, delta, records)``
    exactly once, possibly concurrently across sources. Per-source errors are
    logged and retried on the next due cycle.
    """
    sources = store.sources()
    if not sources:
        raise UnreachableSource("no sources registered")
    next_due = {sid: time.monotonic() for sid in sources}
    in_flight: set[str] = set()
    guard = threading.Lock()

    def cycle(source_id: str) -> None:
        try:
            delta, staged = store.ingest_once(source_id)
            if not delta.is_empty():
                trigger(source_id, delta, staged.records)
        except Exception:
            log.exception("poll cycle for %s failed; will retry next interval", source_id)
        finally:
            with guard:
                in_flight.discard(source_id)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        while not stop.is_set():
            now = time.monotonic()
            for sid, desc in store.sources().items():
                with guard:
                    if sid in in_flight or now < next_due.get(sid, now):
                        continue
                    in_flight.add(sid)
                next_due[sid] = now + desc.poll_interval_s
                pool.submit(cycle, sid)
            stop.wait(tick_s)
    log.info("poll loop stopped")
