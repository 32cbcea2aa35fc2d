"""Stage-2 ETL: classify staged files, flatten documents, merge, publish.

The crawl is a five-step composition over one batch of staged files:

    1. open the staging store and catalog with configured permissions
    2. classify each file (custom filename rules first, then field matching)
    3. parse + validate + flatten into relational rows
    4. merge rows into the current catalog, resolving conflicts and dedup
    5. publish an immutable content-addressed snapshot

Files that fail classification or validation are quarantined with a reason
and never partially loaded; a bad file cannot block the rest of the batch.
"""

from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import dataclass, field

from .dictionary import DataDictionary, EntitySchema, PropertySpec, validate_document
from .errors import SchemaConflictError, TypeCoercionError, UnclassifiableError
from .ingest import IngestRecord, StagingStore
from .snapshots import (
    CatalogSnapshot,
    CatalogStore,
    Column,
    LoadedSnapshot,
    QuarantineEntry,
    StoredRow,
    TableDefinition,
    canonical_row,
)

log = logging.getLogger(__name__)

CustomRule = tuple[str, str]  # (filename glob, entity name)


@dataclass(frozen=True)
class ClassifierResult:
    relative_path: str
    format: str  # json | tsv
    entity: str | None  # None = unknown
    matched_by: str  # custom | built_in
    confidence: float


@dataclass
class StagedRows:
    """Rows grouped by table, each carrying its originating ingest record."""

    tables: dict[str, TableDefinition] = field(default_factory=dict)
    rows: dict[str, list[StoredRow]] = field(default_factory=dict)

    def add(self, table: TableDefinition, row: StoredRow) -> None:
        self.tables.setdefault(table.table_name, table)
        self.rows.setdefault(table.table_name, []).append(row)


@dataclass
class MergeResult:
    dictionary_version: str
    parent_snapshot: str | None
    tables: dict[str, TableDefinition]
    rows: dict[str, dict[str, StoredRow]]  # table -> pk -> row
    lineage: set[str]


@dataclass
class CrawlReport:
    snapshot: CatalogSnapshot
    quarantined: list[QuarantineEntry]
    files_loaded: int
    rows_merged: int
    snapshot_bytes: int

    def bytes_per_case(self) -> float:
        case_count = max(self.snapshot.row_counts.get(case_table_name(self), 0), 1)
        return self.snapshot_bytes / case_count


def case_table_name(report: "CrawlReport") -> str:
    for table in report.snapshot.tables:
        if table.parent_key is None:
            return table.table_name
    return ""


# --- table definitions -------------------------------------------------------


def table_definitions(d: DataDictionary) -> dict[str, TableDefinition]:
    """Derive one relational table per entity.

    Column order is stable: primary key, then (for child tables) the parent
    key referencing the linked parent's primary key, then the remaining
    properties in dictionary order. Extra columns discovered in documents are
    appended later, sorted by name.
    """
    out: dict[str, TableDefinition] = {}
    for ent in d.entities.values():
        columns = [Column(ent.id_property, "string", False)]
        parent_key = None
        parent_multiplicity = None
        parent = d.parent_of(ent.name)
        if parent is not None:
            parent_name, link = parent
            parent_id = d.entities[parent_name].id_property
            columns.append(Column(parent_id, "string", False))
            parent_key = (parent_id, parent_name)
            parent_multiplicity = link.multiplicity
        for prop in ent.properties.values():
            if prop.name == ent.id_property:
                continue
            columns.append(Column(prop.name, prop.kind, prop.nullable))
        out[ent.name] = TableDefinition(
            table_name=ent.name,
            columns=columns,
            primary_key=ent.id_property,
            parent_key=parent_key,
            parent_multiplicity=parent_multiplicity,
        )
    return out


# --- classification ------------------------------------------------------------


def detect_format(data: bytes) -> tuple[str, str]:
    """Detect json vs tsv structurally. Returns (format, decoded text)."""
    if not data:
        raise UnclassifiableError("empty file")
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UnclassifiableError(f"not UTF-8 text: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{") or stripped.startswith("["):
        return "json", text
    header = text.splitlines()[0] if text.splitlines() else ""
    if "\t" in header and all(col.strip() for col in header.split("\t")):
        return "tsv", text
    raise UnclassifiableError("neither JSON nor tab-separated text")


def _match_names(d: DataDictionary, ent: EntitySchema) -> set[str]:
    names = set(ent.properties) | {lk.name for lk in ent.links}
    parent = d.parent_of(ent.name)
    if parent is not None:
        names.add(d.entities[parent[0]].id_property)
    return names


def _observed_fields(fmt: str, text: str) -> list[str]:
    if fmt == "tsv":
        header = text.splitlines()[0]
        return [c.strip() for c in header.split("\t")]
    docs = json.loads(text)
    if isinstance(docs, dict):
        return list(docs)
    if isinstance(docs, list) and docs and isinstance(docs[0], dict):
        return list(docs[0])
    return []


def classify_file(
    d: DataDictionary,
    relative_path: str,
    data: bytes,
    custom_rules: tuple[CustomRule, ...] = (),
) -> ClassifierResult:
    """Identify a staged file's format and entity.

    Custom rules (filename glob -> entity) win over built-in matching. The
    built-in classifier compares observed field names against each entity's
    properties, link names, and parent key column, and requires the entity's
    id property to be present. Confidence is the fraction of observed fields
    known to the chosen entity; files whose fields match nothing are returned
    with entity None for the caller to quarantine.
    """
    fmt, text = detect_format(data)
    try:
        observed = _observed_fields(fmt, text)
    except ValueError:
        observed = []

    name = relative_path.rsplit("/", 1)[-1]
    for pattern, entity in custom_rules:
        if fnmatch.fnmatch(name, pattern) and entity in d.entities:
            confidence = _confidence(d, d.entities[entity], observed)
            return ClassifierResult(relative_path, fmt, entity, "custom", confidence)

    best: tuple[float, str] | None = None
    for ent in d.entities.values():
        if ent.id_property not in observed:
            continue
        score = _confidence(d, ent, observed)
        key = (score, ent.name)
        if best is None or key > best:
            best = key
    if best is None:
        return ClassifierResult(relative_path, fmt, None, "built_in", 0.0)
    return ClassifierResult(relative_path, fmt, best[1], "built_in", best[0])


def _confidence(d: DataDictionary, ent: EntitySchema, observed: list[str]) -> float:
    if not observed:
        return 0.0
    names = _match_names(d, ent)
    return sum(1 for f in observed if f in names) / len(observed)


# --- parsing and coercion ---------------------------------------------------------


def parse_json_documents(text: str) -> list[dict]:
    data = json.loads(text)
    if isinstance(data, dict):
        return [data]
    if isinstance(data, list):
        for i, doc in enumerate(data):
            if not isinstance(doc, dict):
                raise ValueError(f"document {i} is not an object")
        return data
    raise ValueError("top level must be an object or a list of objects")


def parse_tsv_rows(text: str) -> tuple[list[str], list[dict[str, str]]]:
    lines = [line for line in text.split("\n") if line != ""]
    header = [c.strip() for c in lines[0].split("\t")]
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise ValueError(f"line {i}: expected {len(header)} columns, got {len(cells)}")
        rows.append(dict(zip(header, cells)))
    return header, rows


def coerce_value(prop: PropertySpec, value, path: str):
    """Coerce a scalar to its declared kind, or raise TypeCoercionError."""
    if value is None:
        return None
    kind = prop.kind
    if kind == "string" or kind == "enum" or kind == "date":
        if isinstance(value, (dict, list)):
            raise TypeCoercionError(f"expected {kind}, got {type(value).__name__}", path)
        return value if isinstance(value, str) else str(value)
    if kind == "integer":
        if isinstance(value, bool):
            raise TypeCoercionError("expected integer, got boolean", path)
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value.strip())
            except ValueError:
                pass
        raise TypeCoercionError(f"cannot coerce {value!r} to integer", path)
    if kind == "number":
        if isinstance(value, bool):
            raise TypeCoercionError("expected number, got boolean", path)
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value.strip())
            except ValueError:
                pass
        raise TypeCoercionError(f"cannot coerce {value!r} to number", path)
    if kind == "boolean":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "false"):
            return value.strip().lower() == "true"
        raise TypeCoercionError(f"cannot coerce {value!r} to boolean", path)
    raise TypeCoercionError(f"unknown kind {kind!r}", path)


def typed_doc_from_tsv_row(ent: EntitySchema, raw: dict[str, str], rownum: int) -> dict:
    """Convert one TSV row of raw strings to a typed document.

    Empty cells become absent fields; unknown columns stay as strings (they
    flatten into extra columns). The parent key column, when present, is kept
    verbatim for the flattening step to pick up.
    """
    doc: dict = {}
    for col, raw_value in raw.items():
        if raw_value == "":
            continue
        prop = ent.properties.get(col)
        if prop is None:
            doc[col] = raw_value
        else:
            doc[col] = coerce_value(prop, raw_value, f"row {rownum}: {col}")
    return doc


def stringify_extra(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, separators=(",", ":"), sort_keys=True)


# --- flattening ----------------------------------------------------------------


def flatten_document(
    d: DataDictionary,
    entity: str,
    doc: dict,
    parent_key_value: str | None = None,
    _path: str = "",
) -> dict[str, list[dict]]:
    """Flatten a nested document into rows grouped by table.

    The document itself becomes one row; each linked child becomes a row in
    the child's table carrying this row's primary key in the parent column.
    Recursion follows the dictionary's link tree. Scalars are coerced to
    their declared kinds; absent nullable fields become nulls; fields unknown
    to the dictionary are preserved as string-valued extra columns.
    """
    ent = d.entities[entity]
    prefix = _path or entity
    pk_value = doc.get(ent.id_property)
    if not isinstance(pk_value, str) or not pk_value:
        raise TypeCoercionError("missing or non-string primary key", f"{prefix}.{ent.id_property}")

    row: dict = {ent.id_property: pk_value}
    parent = d.parent_of(ent.name)
    parent_col = None
    if parent is not None:
        parent_col = d.entities[parent[0]].id_property
        if parent_key_value is None:
            parent_key_value = doc.get(parent_col)
        if not isinstance(parent_key_value, str) or not parent_key_value:
            raise TypeCoercionError("missing parent key value", f"{prefix}.{parent_col}")
        row[parent_col] = parent_key_value

    link_names = {lk.name for lk in ent.links}
    for prop in ent.properties.values():
        if prop.name == ent.id_property:
            continue
        row[prop.name] = coerce_value(prop, doc.get(prop.name), f"{prefix}.{prop.name}")
    for key, value in doc.items():
        if key in ent.properties or key in link_names or key == parent_col:
            continue
        row[key] = stringify_extra(value)

    out: dict[str, list[dict]] = {ent.name: [row]}
    for lk in ent.links:
        children = doc.get(lk.name)
        if children is None:
            continue
        child_docs = [children] if lk.multiplicity == "one_to_one" else children
        for i, child in enumerate(child_docs):
            child_rows = flatten_document(
                d, lk.target_entity, child, pk_value, f"{prefix}.{lk.name}[{i}]"
            )
            for table, rows in child_rows.items():
                out.setdefault(table, []).extend(rows)
    return out


# --- merge ------------------------------------------------------------------------


def _unify_definition(
    current: TableDefinition, incoming: TableDefinition
) -> TableDefinition:
    """Schema evolution: append new nullable columns; widen integer->number;
    anything else conflicting raises SchemaConflictError."""
    columns = list(current.columns)
    by_name = {c.name: i for i, c in enumerate(columns)}
    extras = list(current.extras)
    for col in incoming.columns:
        if col.name not in by_name:
            columns.append(Column(col.name, col.kind, True))
            by_name[col.name] = len(columns) - 1
            if col.name in incoming.extras and col.name not in extras:
                extras.append(col.name)
            continue
        existing = columns[by_name[col.name]]
        if existing.kind == col.kind:
            continue
        kinds = {existing.kind, col.kind}
        if kinds == {"integer", "number"}:
            columns[by_name[col.name]] = Column(col.name, "number", existing.nullable)
        else:
            raise SchemaConflictError(
                f"{current.table_name}.{col.name}: kind {col.kind!r} conflicts "
                f"with existing {existing.kind!r}"
            )
    return TableDefinition(
        table_name=current.table_name,
        columns=columns,
        primary_key=current.primary_key,
        parent_key=current.parent_key,
        parent_multiplicity=current.parent_multiplicity,
        extras=extras,
    )


def _widen_values(table: TableDefinition, rows: dict[str, StoredRow]) -> None:
    number_cols = [c.name for c in table.columns if c.kind == "number"]
    for pk, row in rows.items():
        for name in number_cols:
            value = row.values.get(name)
            if isinstance(value, int) and not isinstance(value, bool):
                row.values[name] = float(value)


def row_wins(candidate: StoredRow, incumbent: StoredRow, table: TableDefinition) -> bool:
    """Deterministic conflict rule: latest source modified_at wins, ties fall
    to the lexicographically greater ingest digest, then greater row content.
    Independent of merge order by construction."""
    a = (candidate.modified_at, candidate.origin, canonical_row(table, candidate.values))
    b = (incumbent.modified_at, incumbent.origin, canonical_row(table, incumbent.values))
    return a > b


def merge_catalog(
    current: LoadedSnapshot | None,
    staged: StagedRows,
    lineage_records: list[IngestRecord],
    dictionary_version: str,
) -> MergeResult:
    """Upsert staged rows into the current catalog content.

    Rows are keyed by primary key. Exact duplicates deduplicate silently;
    conflicting versions of a key resolve by ``row_wins``; losing versions
    remain visible through lineage. Schema evolution may append nullable
    columns and widen integer to number; other kind changes raise
    SchemaConflictError.
    """
    tables: dict[str, TableDefinition] = {}
    rows: dict[str, dict[str, StoredRow]] = {}
    lineage: set[str] = set()
    parent_id = None
    if current is not None:
        parent_id = current.meta.snapshot_id
        lineage.update(current.meta.lineage)
        for t in current.meta.tables:
            tables[t.table_name] = t
            rows[t.table_name] = dict(current.rows.get(t.table_name, {}))

    for name, incoming_def in staged.tables.items():
        if name in tables:
            tables[name] = _unify_definition(tables[name], incoming_def)
        else:
            tables[name] = incoming_def
        rows.setdefault(name, {})
        _widen_values(tables[name], rows[name])

    for name, staged_rows in staged.rows.items():
        table = tables[name]
        target = rows[name]
        known = set(table.column_names())
        for row in staged_rows:
            stray = set(row.values) - known
            if stray:
                raise SchemaConflictError(
                    f"{name}: rows carry undeclared columns {sorted(stray)}"
                )
            values = dict(row.values)
            for col in table.columns:
                values.setdefault(col.name, None)
                if col.kind == "number" and isinstance(values[col.name], int):
                    values[col.name] = float(values[col.name])
            candidate = StoredRow(values=values, origin=row.origin, modified_at=row.modified_at)
            pk = values[table.primary_key]
            incumbent = target.get(pk)
            if incumbent is None or row_wins(candidate, incumbent, table):
                target[pk] = candidate

    lineage.update(r.digest for r in lineage_records)
    return MergeResult(
        dictionary_version=dictionary_version,
        parent_snapshot=parent_id,
        tables=tables,
        rows=rows,
        lineage=lineage,
    )


def publish_snapshot(
    catalog: CatalogStore, merge: MergeResult, note: str | None = None
) -> CatalogSnapshot:
    """Write the merged content as an immutable snapshot and move HEAD."""
    return catalog.write_snapshot(
        dictionary_version=merge.dictionary_version,
        tables=merge.tables,
        rows=merge.rows,
        lineage=merge.lineage,
        parent_snapshot=merge.parent_snapshot,
        note=note,
    )


# --- the crawl ----------------------------------------------------------------------


def pending_ingest_records(staging: StagingStore, catalog: CatalogStore) -> list[IngestRecord]:
    """Staged live files not yet merged into HEAD and not quarantined."""
    head = catalog.head()
    incorporated: set[str] = set()
    if head:
        incorporated.update(catalog.load_meta(head).lineage)
    incorporated.update(catalog.quarantined_digests())
    out: list[IngestRecord] = []
    for source_id in sorted(staging.sources()):
        for path, entry in sorted(staging.live_index(source_id).items()):
            if entry["digest"] in incorporated:
                continue
            out.append(
                IngestRecord(
                    source_id=source_id,
                    relative_path=path,
                    size=entry["size"],
                    modified_at=entry["modified_at"],
                    digest=entry["digest"],
                    staged_at=entry["staged_at"],
                )
            )
    return out


class _ValidationFailure(Exception):
    """Internal: a document failed validate_document inside the crawl."""


def _file_to_rows(
    d: DataDictionary,
    defs: dict[str, TableDefinition],
    record: IngestRecord,
    data: bytes,
    custom_rules: tuple[CustomRule, ...],
) -> StagedRows:
    """Classify/parse/validate/flatten one staged file. Raises on any problem
    so the caller can quarantine the whole file (never partially loaded)."""
    result = classify_file(d, record.relative_path, data, custom_rules)
    text = data.decode("utf-8")

    if result.format == "json":
        docs = parse_json_documents(text)
    else:
        _, raw_rows = parse_tsv_rows(text)
        docs = []
    if result.entity is None:
        raise UnclassifiableError("no entity matched the observed fields")
    ent = d.entities[result.entity]
    if result.format == "tsv":
        docs = [typed_doc_from_tsv_row(ent, raw, i) for i, raw in enumerate(raw_rows, start=2)]

    rows_by_table: dict[str, list[dict]] = {}
    extras_by_table: dict[str, set[str]] = {}
    for i, doc in enumerate(docs):
        violations = validate_document(d, result.entity, doc)
        if violations:
            first = violations[0]
            raise _ValidationFailure(
                f"document {i}: {len(violations)} violation(s), first: {first.path}: {first.reason}"
            )
        for table_name, rows in flatten_document(d, result.entity, doc).items():
            declared = set(defs[table_name].column_names())
            for row in rows:
                extras = set(row) - declared
                if extras:
                    extras_by_table.setdefault(table_name, set()).update(extras)
            rows_by_table.setdefault(table_name, []).extend(rows)

    staged = StagedRows()
    for table_name, rows in rows_by_table.items():
        base = defs[table_name]
        extras = sorted(extras_by_table.get(table_name, ()))
        table = base
        if extras:
            table = TableDefinition(
                table_name=table_name,
                columns=list(base.columns) + [Column(n, "string", True) for n in extras],
                primary_key=base.primary_key,
                parent_key=base.parent_key,
                parent_multiplicity=base.parent_multiplicity,
                extras=extras,
            )
        staged.tables[table_name] = table
        staged.rows[table_name] = [
            StoredRow(values=row, origin=record.digest, modified_at=record.modified_at)
            for row in rows
        ]
    return staged


def crawl(
    d: DataDictionary,
    staging: StagingStore,
    catalog: CatalogStore,
    records: list[IngestRecord],
    custom_rules: tuple[CustomRule, ...] = (),
    note: str | None = None,
) -> CrawlReport:
    """Run the full ETL over one batch of staged ingest records.

    Returns the published snapshot (or the unchanged current one when there is
    nothing to merge) plus the quarantine report. Only the final publish can
    raise; per-file failures are quarantined.
    """
    head = catalog.head()
    current: LoadedSnapshot | None = None
    if head and catalog.exists(head):
        current = catalog.load_snapshot(head)
        if current.meta.dictionary_version != d.version:
            log.warning(
                "dictionary version changed (%s -> %s); starting a fresh catalog",
                current.meta.dictionary_version,
                d.version,
            )
            current = None

    skip = catalog.quarantined_digests()
    defs = table_definitions(d)
    # Snapshots always carry every dictionary table, populated or not, so the
    # warehouse can resolve fields against empty tables too.
    batch = StagedRows(tables=dict(defs))
    contributed: list[IngestRecord] = []
    quarantined: list[QuarantineEntry] = []

    def reject(record: IngestRecord, stage: str, reason: str) -> None:
        quarantined.append(QuarantineEntry(record.relative_path, stage, reason, record.digest))

    for record in sorted(records, key=lambda r: (r.source_id, r.relative_path)):
        if record.digest in skip:
            continue
        try:
            data = staging.read_blob(record.digest)
        except OSError as exc:
            reject(record, "classify", f"blob unreadable: {exc}")
            continue
        try:
            staged = _file_to_rows(d, defs, record, data, custom_rules)
        except UnclassifiableError as exc:
            reject(record, "classify", str(exc))
            continue
        except (json.JSONDecodeError, ValueError) as exc:
            reject(record, "parse", str(exc))
            continue
        except TypeCoercionError as exc:
            reject(record, "flatten", str(exc))
            continue
        except _ValidationFailure as exc:
            reject(record, "validate", str(exc))
            continue
        for name, table in staged.tables.items():
            batch.tables[name] = _unify_definition(batch.tables[name], table)
        for name, rows in staged.rows.items():
            batch.rows.setdefault(name, []).extend(rows)
        contributed.append(record)

    if not contributed and not quarantined and current is not None:
        snapshot = current.meta
    else:
        merge = merge_catalog(current, batch, contributed, d.version)
        snapshot = publish_snapshot(catalog, merge, note=note)

    catalog.write_quarantine(snapshot.snapshot_id, quarantined)
    rows_merged = sum(len(rows) for rows in batch.rows.values())
    return CrawlReport(
        snapshot=snapshot,
        quarantined=quarantined,
        files_loaded=len(contributed),
        rows_merged=rows_merged,
        snapshot_bytes=catalog.snapshot_size_bytes(snapshot.snapshot_id),
    )
