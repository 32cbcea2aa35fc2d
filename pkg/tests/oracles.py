"""Independent oracles used across the test suite.

Everything here is deliberately written against raw data structures (nested
documents, plain row dicts) rather than the library's own pipeline, so a test
comparing pipeline output to an oracle exercises two separate code paths.
"""

from __future__ import annotations

import random
import string
from typing import Any

from minds.dictionary import DataDictionary

# --- flatten round-trip oracle -------------------------------------------------


def doc_value_multiset(d: DataDictionary, entity: str, doc: dict) -> list[tuple[str, Any]]:
    """All (path, scalar) leaves of a nested document, link names replaced by
    target entity names and list indices dropped, sorted. Nulls and absent
    fields are both skipped; numbers normalize to float."""
    out: list[tuple[str, Any]] = []

    def walk(entity_name: str, node: dict, prefix: str) -> None:
        ent = d.entities[entity_name]
        for prop in ent.properties.values():
            value = node.get(prop.name)
            if value is None:
                continue
            if prop.kind == "number":
                value = float(value)
            out.append((prefix + prop.name, value))
        for lk in ent.links:
            children = node.get(lk.name)
            if children is None:
                continue
            if lk.multiplicity == "one_to_one":
                children = [children]
            for child in children:
                walk(lk.target_entity, child, prefix + lk.target_entity + ".")

    walk(entity, doc, "")
    return sorted(out, key=lambda item: (item[0], repr(item[1])))


def rows_value_multiset(
    d: DataDictionary, rows_by_table: dict[str, list[dict]], root_id: str
) -> list[tuple[str, Any]]:
    """Reassemble flattened rows reachable from one root row into the same
    (path, scalar) multiset, joining child tables through their parent keys."""
    out: list[tuple[str, Any]] = []
    root_entity = d.case_entity.name

    def emit(entity_name: str, row: dict, prefix: str, parent_col: str | None) -> None:
        ent = d.entities[entity_name]
        for col, value in row.items():
            if value is None or col == parent_col:
                continue
            prop = ent.properties.get(col)
            if prop is not None and prop.kind == "number":
                value = float(value)
            out.append((prefix + col, value))

    def descend(entity_name: str, row_id: str, prefix: str) -> None:
        ent = d.entities[entity_name]
        for lk in ent.links:
            child_name = lk.target_entity
            child_ent = d.entities[child_name]
            parent_col = ent.id_property
            for row in rows_by_table.get(child_name, []):
                if row.get(parent_col) == row_id:
                    emit(child_name, row, prefix + child_name + ".", parent_col)
                    descend(child_name, row[child_ent.id_property], prefix + child_name + ".")

    root_rows = [
        r for r in rows_by_table.get(root_entity, []) if r.get(d.case_entity.id_property) == root_id
    ]
    assert len(root_rows) == 1, f"expected exactly one root row for {root_id}"
    emit(root_entity, root_rows[0], "", None)
    descend(root_entity, root_id, "")
    return sorted(out, key=lambda item: (item[0], repr(item[1])))


# --- random conforming documents ------------------------------------------------


def random_scalar(rng: random.Random, kind: str, enum_values: tuple[str, ...]):
    if kind == "string":
        return "".join(rng.choices(string.ascii_lowercase + " _-", k=rng.randint(1, 18)))
    if kind == "integer":
        return rng.randint(-5000, 5000)
    if kind == "number":
        return round(rng.uniform(-100, 100), 4)
    if kind == "boolean":
        return rng.random() < 0.5
    if kind == "date":
        return f"{rng.randint(1950, 2024):04d}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    return rng.choice(enum_values)


def random_conforming_doc(
    d: DataDictionary,
    rng: random.Random,
    entity: str | None = None,
    id_prefix: str = "r",
    max_children: int = 3,
) -> dict:
    """Generate a nested document that validate_document accepts."""
    counter = [0]

    def build(entity_name: str) -> dict:
        ent = d.entities[entity_name]
        counter[0] += 1
        doc: dict = {ent.id_property: f"{id_prefix}-{entity_name}-{counter[0]:04d}"}
        for prop in ent.properties.values():
            if prop.name == ent.id_property:
                continue
            if prop.nullable and rng.random() < 0.3:
                if rng.random() < 0.3:
                    doc[prop.name] = None
                continue
            doc[prop.name] = random_scalar(rng, prop.kind, prop.enum_values)
        for lk in ent.links:
            if lk.multiplicity == "one_to_one":
                if lk.required or rng.random() < 0.7:
                    doc[lk.name] = build(lk.target_entity)
            else:
                low = 1 if lk.required else 0
                count = rng.randint(low, max_children)
                if count:
                    doc[lk.name] = [build(lk.target_entity) for _ in range(count)]
        return doc

    return build(entity or d.case_entity.name)


# --- brute-force query interpreter ------------------------------------------------

from minds.cql import (  # noqa: E402
    AndExpr,
    Cmp,
    CohortQuery,
    InList,
    IsNull,
    NotExpr,
    OrExpr,
    TrueExpr,
)


class BruteForce:
    """Row-by-row reference interpreter with materialized parent joins.

    Re-implements the query semantics from scratch over plain row dicts:
    no case indexes, no warehouse machinery. Used to cross-check the engine.
    """

    def __init__(self, tables, rows_by_table: dict[str, list[dict]]):
        self.tables = tables
        self.rows = rows_by_table
        self.case_table = next(n for n, t in tables.items() if t.parent_key is None)
        self.pk_maps = {
            name: {row[t.primary_key]: row for row in rows_by_table.get(name, [])}
            for name, t in tables.items()
        }

    def owner_case(self, table: str, row: dict) -> str | None:
        while True:
            t = self.tables[table]
            if t.parent_key is None:
                return row[t.primary_key]
            parent_col, parent_table = t.parent_key
            parent_row = self.pk_maps[parent_table].get(row.get(parent_col))
            if parent_row is None:
                return None
            table, row = parent_table, parent_row

    def rows_of_case(self, table: str, case_id: str) -> list[dict]:
        return [r for r in self.rows.get(table, []) if self.owner_case(table, r) == case_id]

    def compare(self, value, op: str, lit) -> bool:
        if value is None:
            return False
        if lit.kind == "string" and isinstance(value, str):
            left, right = value, str(lit.value)
            if self._is_enum_value:
                left, right = left.casefold(), right.casefold()
        elif lit.kind == "number":
            try:
                left, right = float(value), float(lit.value)
            except (TypeError, ValueError):
                return False
        else:
            left, right = value, lit.value
        import operator as _op

        table = {"=": _op.eq, "!=": _op.ne, "<": _op.lt, "<=": _op.le, ">": _op.gt, ">=": _op.ge}
        try:
            return table[op](left, right)
        except TypeError:
            return False

    def holds(self, pred, case_id: str) -> bool:
        if isinstance(pred, TrueExpr):
            return True
        if isinstance(pred, NotExpr):
            return not self.holds(pred.child, case_id)
        if isinstance(pred, AndExpr):
            return all(self.holds(c, case_id) for c in pred.children)
        if isinstance(pred, OrExpr):
            return any(self.holds(c, case_id) for c in pred.children)
        f = pred.field
        self._is_enum_value = f.kind == "enum"
        if f.table == self.case_table:
            case_row = self.pk_maps[self.case_table][case_id]
            candidates = [case_row.get(f.column)]
            exists = True
        else:
            rows = self.rows_of_case(f.table, case_id)
            candidates = [r.get(f.column) for r in rows]
            exists = bool(rows)
        if isinstance(pred, IsNull):
            if not exists:
                return False
            return any((v is not None) if pred.negated else (v is None) for v in candidates)
        if isinstance(pred, Cmp):
            return any(self.compare(v, pred.op, pred.literal) for v in candidates)
        if isinstance(pred, InList):
            return any(self.compare(v, "=", lit) for v in candidates for lit in pred.literals)
        raise TypeError(pred)

    def select_cases(self, q: CohortQuery) -> list[str]:
        pred = q.where if q.where is not None else TrueExpr()
        return sorted(
            cid for cid in self.pk_maps[self.case_table] if self.holds(pred, cid)
        )

    def count_by(self, q: CohortQuery) -> dict[str, int]:
        matching = self.select_cases(CohortQuery("", "", "select_cases", q.where))
        counts: dict[str, int] = {}
        for cid in matching:
            f = q.by
            if f.table == self.case_table:
                value = self.pk_maps[self.case_table][cid].get(f.column)
            else:
                seen = {
                    r[f.column]
                    for r in self.rows_of_case(f.table, cid)
                    if r.get(f.column) is not None
                }
                ordered = sorted(seen, key=lambda v: (str(type(v).__name__), v))
                value = ordered[0] if ordered else None
            if value is None:
                label = "missing"
            elif value is True:
                label = "true"
            elif value is False:
                label = "false"
            elif isinstance(value, float) and value.is_integer():
                label = str(int(value))
            else:
                label = str(value)
            counts[label] = counts.get(label, 0) + 1
        return counts


# --- random query text ----------------------------------------------------------------


def _render_literal(rng: random.Random, kind: str, sample_values: list) -> str:
    if kind in ("string", "enum"):
        if sample_values and rng.random() < 0.8:
            value = str(rng.choice(sample_values))
            if kind == "enum" and rng.random() < 0.3:
                value = value.upper() if rng.random() < 0.5 else value.lower()
        else:
            value = "".join(rng.choices(string.ascii_lowercase, k=5))
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if kind == "integer":
        if sample_values and rng.random() < 0.7:
            return str(rng.choice(sample_values))
        return str(rng.randint(-5000, 5000))
    if kind == "number":
        if sample_values and rng.random() < 0.7:
            return repr(float(rng.choice(sample_values)))
        return repr(round(rng.uniform(-100, 100), 3))
    if kind == "boolean":
        return rng.choice(["TRUE", "FALSE"])
    if sample_values and rng.random() < 0.7:
        return str(rng.choice(sample_values))
    return f"{rng.randint(1950, 2024):04d}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"


def random_query_text(rng: random.Random, tables, rows_by_table, max_depth: int = 3) -> str:
    """Random CQL text (depth-bounded) whose fields and most literals come
    from the given tables/rows."""
    case_table = next(n for n, t in tables.items() if t.parent_key is None)
    fields = []
    for name, t in sorted(tables.items()):
        for col in t.columns:
            if t.parent_key and col.name in (t.primary_key, t.parent_key[0]):
                continue
            fields.append((name, col.name, col.kind))

    def sample_values(table: str, column: str) -> list:
        values = [r[column] for r in rows_by_table.get(table, []) if r.get(column) is not None]
        rng.shuffle(values)
        return values[:10]

    def leaf() -> str:
        table, column, kind = rng.choice(fields)
        path = f"{table}.{column}" if rng.random() < 0.8 or table != case_table else column
        roll = rng.random()
        if roll < 0.12:
            return "TRUE"
        if roll < 0.27:
            return f"{path} IS {'NOT ' if rng.random() < 0.5 else ''}NULL"
        values = sample_values(table, column)
        if roll < 0.42 and kind in ("string", "enum", "integer", "number", "date"):
            lits = [_render_literal(rng, kind, values) for _ in range(rng.randint(1, 3))]
            return f"{path} IN ({', '.join(lits)})"
        if kind in ("string", "enum", "boolean"):
            op = rng.choice(["=", "!="])
        else:
            op = rng.choice(["=", "!=", "<", "<=", ">", ">="])
        return f"{path} {op} {_render_literal(rng, kind, values)}"

    def pred(depth: int) -> str:
        if depth <= 0 or rng.random() < 0.35:
            return leaf()
        roll = rng.random()
        if roll < 0.25:
            return f"NOT ({pred(depth - 1)})"
        joiner = " AND " if roll < 0.65 else " OR "
        return "(" + joiner.join(pred(depth - 1) for _ in range(rng.randint(2, 3))) + ")"

    if rng.random() < 0.8:
        return f"SELECT CASES WHERE {pred(max_depth)}"
    table, column, _ = rng.choice(fields)
    text = f"COUNT CASES BY {table}.{column}"
    if rng.random() < 0.6:
        text += f" WHERE {pred(max_depth - 1)}"
    return text
