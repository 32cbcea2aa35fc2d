"""Immutable, content-addressed catalog snapshots.

A snapshot is a directory of table definitions plus rows with ingest lineage.
Its id is the sha256 of a canonical serialization (documented byte-for-byte in
``docs/canonical-serialization.md``) over

    (dictionary_version, table definitions, rows sorted by (table, pk), lineage)

so equal content always reproduces an equal id, on any machine, at any time.
``created_at``, ``parent_snapshot``, and the free-form note are provenance
metadata and deliberately excluded from the id.

On-disk layout under the catalog root:

    snapshots/<snapshot_id>/meta.json
    snapshots/<snapshot_id>/tables/<table>.jsonl     one row object per line
    HEAD                                             current snapshot id
    quarantine/<snapshot_id>.jsonl                   per-crawl reject report
    quarantine/index.tsv                             cumulative digest -> reason
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .util import atomic_write_text, utc_now_iso

CANONICAL_FORMAT = "catalog-canonical-1"
NULL_CELL = r"\N"

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    nullable: bool


@dataclass
class TableDefinition:
    """Relational shape of one entity: columns, key, and parent linkage."""

    table_name: str
    columns: list[Column]
    primary_key: str
    parent_key: tuple[str, str] | None = None  # (column, parent table)
    parent_multiplicity: str | None = None
    extras: list[str] = field(default_factory=list)  # appended non-dictionary columns

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None

    def to_json(self) -> dict:
        return {
            "table_name": self.table_name,
            "columns": [[c.name, c.kind, c.nullable] for c in self.columns],
            "primary_key": self.primary_key,
            "parent_key": list(self.parent_key) if self.parent_key else None,
            "parent_multiplicity": self.parent_multiplicity,
            "extras": self.extras,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TableDefinition":
        return cls(
            table_name=data["table_name"],
            columns=[Column(*c) for c in data["columns"]],
            primary_key=data["primary_key"],
            parent_key=tuple(data["parent_key"]) if data.get("parent_key") else None,
            parent_multiplicity=data.get("parent_multiplicity"),
            extras=list(data.get("extras", [])),
        )


@dataclass(frozen=True)
class StoredRow:
    """Row values plus the ingest record that supplied them."""

    values: dict
    origin: str  # ingest content digest
    modified_at: str  # source file modification time


@dataclass
class CatalogSnapshot:
    snapshot_id: str
    dictionary_version: str
    tables: list[TableDefinition]
    row_counts: dict[str, int]
    created_at: str
    lineage: list[str]
    parent_snapshot: str | None = None
    note: str | None = None

    def table(self, name: str) -> TableDefinition | None:
        for t in self.tables:
            if t.table_name == name:
                return t
        return None


@dataclass
class LoadedSnapshot:
    meta: CatalogSnapshot
    rows: dict[str, dict[str, StoredRow]]  # table -> pk -> row


@dataclass(frozen=True)
class QuarantineEntry:
    path: str
    stage: str  # classify | parse | validate | flatten
    reason: str
    digest: str = ""


# --- canonical serialization -------------------------------------------------


def canonical_cell(value) -> str:
    """Render one cell. Nulls use a fixed sentinel; strings are escaped so
    tabs and newlines cannot collide with the framing."""
    if value is None:
        return NULL_CELL
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(ch in text for ch in ("\\", "\t", "\n", "\r")):
        for raw, esc in _ESCAPES.items():
            text = text.replace(raw, esc)
    return text


def canonical_row(table: TableDefinition, values: dict) -> str:
    return "\t".join(canonical_cell(values.get(name)) for name in table.column_names())


def canonical_lines(
    dictionary_version: str,
    tables: dict[str, TableDefinition],
    rows: dict[str, dict[str, StoredRow]],
    lineage: Iterable[str],
) -> Iterator[str]:
    yield CANONICAL_FORMAT
    yield f"dictionary-version:{dictionary_version}"
    for name in sorted(tables):
        table = tables[name]
        yield f"table:{name}"
        yield "columns:" + ",".join(
            f"{c.name}:{c.kind}:{int(c.nullable)}" for c in table.columns
        )
        yield f"pk:{table.primary_key}"
        if table.parent_key:
            col, parent = table.parent_key
            yield f"parent:{col}:{parent}:{table.parent_multiplicity}"
        table_rows = rows.get(name, {})
        for pk in sorted(table_rows):
            yield "row:" + canonical_row(table, table_rows[pk].values)
    for digest in sorted(set(lineage)):
        yield f"lineage:{digest}"


def compute_snapshot_id(
    dictionary_version: str,
    tables: dict[str, TableDefinition],
    rows: dict[str, dict[str, StoredRow]],
    lineage: Iterable[str],
) -> str:
    h = hashlib.sha256()
    for line in canonical_lines(dictionary_version, tables, rows, lineage):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# --- store --------------------------------------------------------------------


class CatalogStore:
    """Snapshot persistence: append-only snapshot dirs plus a HEAD pointer."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.snapshots_dir = self.root / "snapshots"
        self.quarantine_dir = self.root / "quarantine"

    def snapshot_dir(self, snapshot_id: str) -> Path:
        return self.snapshots_dir / snapshot_id

    def exists(self, snapshot_id: str) -> bool:
        return (self.snapshot_dir(snapshot_id) / "meta.json").exists()

    def head(self) -> str | None:
        path = self.root / "HEAD"
        if not path.exists():
            return None
        text = path.read_text("utf-8").strip()
        return text or None

    def set_head(self, snapshot_id: str) -> None:
        atomic_write_text(self.root / "HEAD", snapshot_id + "\n")

    def list_snapshots(self) -> list[CatalogSnapshot]:
        if not self.snapshots_dir.exists():
            return []
        metas = [self.load_meta(p.name) for p in sorted(self.snapshots_dir.iterdir()) if p.is_dir()]
        return sorted(metas, key=lambda m: m.created_at)

    def load_meta(self, snapshot_id: str) -> CatalogSnapshot:
        path = self.snapshot_dir(snapshot_id) / "meta.json"
        data = json.loads(path.read_text("utf-8"))
        return CatalogSnapshot(
            snapshot_id=data["snapshot_id"],
            dictionary_version=data["dictionary_version"],
            tables=[TableDefinition.from_json(t) for t in data["tables"]],
            row_counts=data["row_counts"],
            created_at=data["created_at"],
            lineage=data["lineage"],
            parent_snapshot=data.get("parent_snapshot"),
            note=data.get("note"),
        )

    def iter_rows(self, snapshot_id: str, table: str) -> Iterator[StoredRow]:
        path = self.snapshot_dir(snapshot_id) / "tables" / f"{table}.jsonl"
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                record = json.loads(line)
                origin = record.pop("_o")
                modified_at = record.pop("_m")
                yield StoredRow(values=record, origin=origin, modified_at=modified_at)

    def load_snapshot(self, snapshot_id: str) -> LoadedSnapshot:
        meta = self.load_meta(snapshot_id)
        rows: dict[str, dict[str, StoredRow]] = {}
        for table in meta.tables:
            by_pk: dict[str, StoredRow] = {}
            for row in self.iter_rows(snapshot_id, table.table_name):
                by_pk[row.values[table.primary_key]] = row
            rows[table.table_name] = by_pk
        return LoadedSnapshot(meta=meta, rows=rows)

    def write_snapshot(
        self,
        dictionary_version: str,
        tables: dict[str, TableDefinition],
        rows: dict[str, dict[str, StoredRow]],
        lineage: Iterable[str],
        parent_snapshot: str | None,
        note: str | None = None,
    ) -> CatalogSnapshot:
        """Publish atomically; re-publishing identical content is a no-op that
        returns the already-stored snapshot (original created_at preserved)."""
        lineage_sorted = sorted(set(lineage))
        snapshot_id = compute_snapshot_id(dictionary_version, tables, rows, lineage_sorted)
        if self.exists(snapshot_id):
            self.set_head(snapshot_id)
            return self.load_meta(snapshot_id)

        meta = CatalogSnapshot(
            snapshot_id=snapshot_id,
            dictionary_version=dictionary_version,
            tables=[tables[name] for name in sorted(tables)],
            row_counts={name: len(rows.get(name, {})) for name in sorted(tables)},
            created_at=utc_now_iso(),
            lineage=lineage_sorted,
            parent_snapshot=parent_snapshot,
            note=note,
        )
        self.snapshots_dir.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=self.snapshots_dir, prefix=".publish-"))
        try:
            (tmp / "tables").mkdir()
            for name in sorted(tables):
                with open(tmp / "tables" / f"{name}.jsonl", "w", encoding="utf-8") as f:
                    table_rows = rows.get(name, {})
                    for pk in sorted(table_rows):
                        row = table_rows[pk]
                        payload = dict(row.values)
                        payload["_o"] = row.origin
                        payload["_m"] = row.modified_at
                        f.write(json.dumps(payload, separators=(",", ":"), sort_keys=True))
                        f.write("\n")
            meta_json = {
                "snapshot_id": meta.snapshot_id,
                "dictionary_version": meta.dictionary_version,
                "created_at": meta.created_at,
                "parent_snapshot": meta.parent_snapshot,
                "note": meta.note,
                "row_counts": meta.row_counts,
                "lineage": meta.lineage,
                "tables": [t.to_json() for t in meta.tables],
            }
            (tmp / "meta.json").write_text(json.dumps(meta_json, indent=2) + "\n", "utf-8")
            os.replace(tmp, self.snapshot_dir(snapshot_id))
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        self.set_head(snapshot_id)
        return meta

    def rehash_snapshot(self, snapshot_id: str) -> str:
        """Recompute the content id from disk (immutability check)."""
        loaded = self.load_snapshot(snapshot_id)
        tables = {t.table_name: t for t in loaded.meta.tables}
        return compute_snapshot_id(
            loaded.meta.dictionary_version, tables, loaded.rows, loaded.meta.lineage
        )

    def snapshot_size_bytes(self, snapshot_id: str) -> int:
        total = 0
        for path in self.snapshot_dir(snapshot_id).rglob("*"):
            if path.is_file():
                total += path.stat().st_size
        return total

    # --- quarantine ------------------------------------------------------------

    def write_quarantine(self, snapshot_id: str, entries: list[QuarantineEntry]) -> Path:
        self.quarantine_dir.mkdir(parents=True, exist_ok=True)
        report = self.quarantine_dir / f"{snapshot_id}.jsonl"
        lines = [
            json.dumps({"path": e.path, "stage": e.stage, "reason": e.reason})
            for e in entries
        ]
        atomic_write_text(report, "\n".join(lines) + ("\n" if lines else ""))
        index = self.quarantine_dir / "index.tsv"
        known = self.quarantined_digests()
        with open(index, "a", encoding="utf-8") as f:
            for e in entries:
                if e.digest and e.digest not in known:
                    f.write(f"{e.digest}\t{e.path}\t{e.stage}\t{e.reason}\t{snapshot_id}\n")
        return report

    def quarantined_digests(self) -> set[str]:
        index = self.quarantine_dir / "index.tsv"
        if not index.exists():
            return set()
        return {line.split("\t", 1)[0] for line in index.read_text("utf-8").splitlines() if line}
