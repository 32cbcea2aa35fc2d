"""Embedded warehouse: load catalog snapshots, answer cohort queries.

Loading materializes a snapshot's rows into a warehouse directory (line-
delimited row files with a sidecar schema) and builds in-memory case-ID
indexes. Reloading the currently loaded snapshot applies nothing; loading a
descendant snapshot applies only the row differences. A loaded Warehouse is
immutable and safe for concurrent queries.

Predicates on child tables use EXISTS semantics: a case matches
``diagnosis.tumor_grade = "G3"`` when at least one of its linked diagnosis
rows does; NOT applies at case level, after the child evaluation. Comparisons
with null are false; IS NULL / IS NOT NULL are explicit (and, on child
tables, also EXISTS-quantified: a case with no child rows matches neither).
"""

from __future__ import annotations

import json
import logging
import operator
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cql import (
    AndExpr,
    Cmp,
    CohortQuery,
    FieldRef,
    InList,
    IsNull,
    Lit,
    NotExpr,
    OrExpr,
    QuerySchema,
    TrueExpr,
    parse_query,
)
from .errors import SnapshotMismatch
from .snapshots import CatalogSnapshot, CatalogStore, TableDefinition
from .util import atomic_write_text

log = logging.getLogger(__name__)

MISSING_GROUP = "missing"

_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass
class ResultSet:
    kind: str  # select_cases | count_by
    case_ids: list[str] | None = None
    groups: list[tuple[str, int]] | None = None
    elapsed_s: float = 0.0


@dataclass
class Warehouse:
    snapshot_id: str
    dictionary_version: str
    tables: dict[str, TableDefinition]
    rows: dict[str, list[dict]]
    schema: QuerySchema
    case_ids: list[str] = field(default_factory=list)
    case_rows: dict[str, dict] = field(default_factory=dict)
    case_index: dict[str, dict[str, list[dict]]] = field(default_factory=dict)
    orphan_counts: dict[str, int] = field(default_factory=dict)

    def case_count(self) -> int:
        return len(self.case_ids)

    def parse(self, text: str) -> CohortQuery:
        return parse_query(text, self.schema)


# --- loading ---------------------------------------------------------------------


def _read_warehouse_rows(tables_dir: Path, table: str) -> dict[str, dict]:
    path = tables_dir / f"{table}.jsonl"
    out: dict[str, dict] = {}
    if not path.exists():
        return out
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            out[record["_pk"]] = record["row"]
    return out


def _write_warehouse_rows(tables_dir: Path, table: str, rows: dict[str, dict]) -> None:
    tables_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for pk in sorted(rows):
        lines.append(json.dumps({"_pk": pk, "row": rows[pk]}, separators=(",", ":"), sort_keys=True))
    atomic_write_text(tables_dir / f"{table}.jsonl", "\n".join(lines) + ("\n" if lines else ""))


def _ancestor_chain(catalog: CatalogStore, snapshot_id: str) -> list[str]:
    chain = []
    cursor: str | None = snapshot_id
    while cursor is not None and catalog.exists(cursor):
        chain.append(cursor)
        cursor = catalog.load_meta(cursor).parent_snapshot
    return chain


@dataclass
class LoadStats:
    rows_applied: int
    full_reload: bool


def load_warehouse(
    catalog: CatalogStore,
    snapshot_id: str,
    warehouse_dir: Path | str,
    *,
    full: bool = False,
) -> tuple[Warehouse, LoadStats]:
    """Serve exactly one snapshot's rows from a warehouse directory.

    Reloading the same snapshot applies zero row changes. Loading a snapshot
    that descends from the currently loaded one applies per-table row diffs.
    Anything else raises SnapshotMismatch unless ``full`` forces a rebuild.
    """
    warehouse_dir = Path(warehouse_dir)
    tables_dir = warehouse_dir / "tables"
    state_path = warehouse_dir / "state.json"
    current_id: str | None = None
    if state_path.exists():
        current_id = json.loads(state_path.read_text("utf-8")).get("snapshot_id")

    meta = catalog.load_meta(snapshot_id)
    target_tables = {t.table_name: t for t in meta.tables}

    rows_applied = 0
    full_reload = current_id is None or full
    if current_id == snapshot_id:
        new_rows = {
            name: _read_warehouse_rows(tables_dir, name) for name in target_tables
        }
    else:
        if not full_reload and current_id not in _ancestor_chain(catalog, snapshot_id):
            raise SnapshotMismatch(
                f"loaded snapshot {current_id} is not an ancestor of {snapshot_id}; "
                "pass full=True to rebuild"
            )
        loaded = catalog.load_snapshot(snapshot_id)
        new_rows = {}
        for name in target_tables:
            target = {pk: row.values for pk, row in loaded.rows.get(name, {}).items()}
            current = {} if full_reload else _read_warehouse_rows(tables_dir, name)
            changed = (
                sum(1 for pk, row in target.items() if current.get(pk) != row)
                + sum(1 for pk in current if pk not in target)
            )
            rows_applied += changed
            if changed or not (tables_dir / f"{name}.jsonl").exists():
                _write_warehouse_rows(tables_dir, name, target)
            new_rows[name] = target
        # Drop tables that no longer exist in the snapshot.
        if tables_dir.exists():
            for path in tables_dir.glob("*.jsonl"):
                if path.stem not in target_tables:
                    path.unlink()
        atomic_write_text(
            warehouse_dir / "schema.json",
            json.dumps({n: t.to_json() for n, t in sorted(target_tables.items())}, indent=2) + "\n",
        )
        atomic_write_text(state_path, json.dumps({"snapshot_id": snapshot_id}) + "\n")

    wh = _build_memory_warehouse(meta, target_tables, new_rows)
    return wh, LoadStats(rows_applied=rows_applied, full_reload=full_reload)


def _build_memory_warehouse(
    meta: CatalogSnapshot,
    tables: dict[str, TableDefinition],
    rows_by_pk: dict[str, dict[str, dict]],
) -> Warehouse:
    schema = QuerySchema.from_tables(tables)
    case_table = schema.case_table
    rows = {name: [rows_by_pk[name][pk] for pk in sorted(rows_by_pk[name])] for name in tables}

    case_rows = {row[tables[case_table].primary_key]: row for row in rows[case_table]}
    case_ids = sorted(case_rows)

    # Resolve each row's case id by walking parent keys, parents first.
    case_of: dict[str, dict[str, str]] = {case_table: {cid: cid for cid in case_ids}}
    case_index: dict[str, dict[str, list[dict]]] = {}
    orphans: dict[str, int] = {}

    remaining = [name for name in tables if name != case_table]
    while remaining:
        progressed = False
        for name in list(remaining):
            parent_col, parent_table = tables[name].parent_key  # type: ignore[misc]
            if parent_table not in case_of:
                continue
            remaining.remove(name)
            progressed = True
            parent_map = case_of[parent_table]
            own: dict[str, str] = {}
            index: dict[str, list[dict]] = {}
            pk_col = tables[name].primary_key
            dropped = 0
            for row in rows[name]:
                case_id = parent_map.get(row.get(parent_col))
                if case_id is None:
                    dropped += 1
                    continue
                own[row[pk_col]] = case_id
                index.setdefault(case_id, []).append(row)
            case_of[name] = own
            case_index[name] = index
            if dropped:
                orphans[name] = dropped
                log.warning("%s: %d rows have no reachable case and were not indexed", name, dropped)
        if not progressed:
            raise SnapshotMismatch(f"table parents unresolvable: {remaining}")

    return Warehouse(
        snapshot_id=meta.snapshot_id,
        dictionary_version=meta.dictionary_version,
        tables=tables,
        rows=rows,
        schema=schema,
        case_ids=case_ids,
        case_rows=case_rows,
        case_index=case_index,
        orphan_counts=orphans,
    )


# --- execution --------------------------------------------------------------------


def _compare(value, op: str, lit: Lit, kind: str) -> bool:
    if value is None:
        return False
    if kind == "enum" and lit.kind == "string":
        return _OPS[op](str(value).casefold(), str(lit.value).casefold())
    if lit.kind == "number":
        try:
            return _OPS[op](float(value), float(lit.value))  # type: ignore[arg-type]
        except (TypeError, ValueError):
            return False
    try:
        return _OPS[op](value, lit.value)
    except TypeError:
        return False


def _eval_on_case(wh: Warehouse, pred, case_id: str) -> bool:
    if isinstance(pred, TrueExpr):
        return True
    if isinstance(pred, NotExpr):
        return not _eval_on_case(wh, pred.child, case_id)
    if isinstance(pred, AndExpr):
        return all(_eval_on_case(wh, c, case_id) for c in pred.children)
    if isinstance(pred, OrExpr):
        return any(_eval_on_case(wh, c, case_id) for c in pred.children)

    fieldref = pred.field
    if fieldref.table == wh.schema.case_table:
        values = [wh.case_rows[case_id].get(fieldref.column)]
        row_exists = True
    else:
        rows = wh.case_index.get(fieldref.table, {}).get(case_id, [])
        values = [row.get(fieldref.column) for row in rows]
        row_exists = bool(rows)

    if isinstance(pred, IsNull):
        if not row_exists:
            return False
        if pred.negated:
            return any(v is not None for v in values)
        return any(v is None for v in values)
    if isinstance(pred, Cmp):
        return any(_compare(v, pred.op, pred.literal, fieldref.kind) for v in values)
    if isinstance(pred, InList):
        return any(
            _compare(v, "=", lit, fieldref.kind) for v in values for lit in pred.literals
        )
    raise TypeError(f"unknown predicate node {pred!r}")


def group_label(value) -> str:
    if value is None:
        return MISSING_GROUP
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _group_value(wh: Warehouse, fieldref: FieldRef, case_id: str):
    """The grouping value of one case for COUNT CASES BY.

    Case-table fields group by their value. Child-table fields group by the
    smallest distinct non-null value among the case's child rows, so grouping
    always partitions the matching cases; cases with no value fall into the
    ``missing`` group.
    """
    if fieldref.table == wh.schema.case_table:
        return wh.case_rows[case_id].get(fieldref.column)
    rows = wh.case_index.get(fieldref.table, {}).get(case_id, [])
    values = sorted(
        {row[fieldref.column] for row in rows if row.get(fieldref.column) is not None},
        key=lambda v: (str(type(v).__name__), v),
    )
    return values[0] if values else None


def execute_query(wh: Warehouse, q: CohortQuery) -> ResultSet:
    """Evaluate a parsed query. select_cases returns sorted distinct case IDs;
    count_by returns (group label, count) pairs sorted by label, nulls under
    ``missing``."""
    start = time.perf_counter()
    pred = q.where if q.where is not None else TrueExpr()
    matching = [cid for cid in wh.case_ids if _eval_on_case(wh, pred, cid)]
    if q.kind == "select_cases":
        return ResultSet(
            kind="select_cases", case_ids=matching, elapsed_s=time.perf_counter() - start
        )
    counts: dict[str, int] = {}
    assert q.by is not None
    for cid in matching:
        label = group_label(_group_value(wh, q.by, cid))
        counts[label] = counts.get(label, 0) + 1
    groups = sorted(counts.items())
    return ResultSet(kind="count_by", groups=groups, elapsed_s=time.perf_counter() - start)


DEFAULT_REPORT_FIELDS = (
    "gender",
    "ethnicity",
    "classification_of_tumor",
    "progression_or_recurrence",
    "year_of_death",
    "cause_of_death",
)


def aggregate_report(
    wh: Warehouse, fields: tuple[str, ...] = DEFAULT_REPORT_FIELDS
) -> list[tuple[str, ResultSet]]:
    """One count_by distribution per field, equal to running COUNT CASES BY.

    Report fields accept a looser resolution than CQL proper: a bare name
    that exists in exactly one table anywhere resolves to it.
    """
    out = []
    for name in fields:
        fieldref = wh.schema.resolve_report_field(name)
        q = parse_query(f"COUNT CASES BY {fieldref.raw}", wh.schema)
        out.append((name, execute_query(wh, q)))
    return out
