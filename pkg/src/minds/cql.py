"""CQL: the cohort query language.

Grammar (EBNF):

    query  := "SELECT CASES WHERE" pred | "COUNT CASES BY" field ["WHERE" pred]
    pred   := or ;  or := and {"OR" and} ;  and := unary {"AND" unary}
    unary  := "NOT" unary | "(" pred ")" | cmp | "TRUE"
    cmp    := fieldpath op literal
            | fieldpath "IN" "(" literal {"," literal} ")"
            | fieldpath "IS" ["NOT"] "NULL"
    op     := "=" | "!=" | "<" | "<=" | ">" | ">=" ;
    fieldpath := [entity "."] field
    literal := quoted string | number | date "YYYY-MM-DD" | "TRUE" | "FALSE"

Keywords are case-insensitive; field paths resolve against the case table
first, then uniquely against its one-to-one children. Parsing is schema-aware:
unknown fields and literal/field type mismatches are rejected here, not at
execution time.

Canonical text is re-rendered from the AST: keywords uppercased, single
spaces, string literals verbatim, numbers without leading zeros or trailing
fraction zeros, field paths lowercased. Canonicalization is idempotent.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field
from typing import Union

from .errors import ParseError, TypeMismatchError, UnknownFieldError
from .snapshots import TableDefinition

ORDER_OPS = ("<", "<=", ">", ">=")
EQUALITY_OPS = ("=", "!=")

_KEYWORDS = {"select", "cases", "where", "count", "by", "and", "or", "not",
             "true", "false", "in", "is", "null"}

_TOKEN_RE = re.compile(
    r"""
    (?P<WS>\s+)
  | (?P<STRING>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<DATE>\d{4}-\d{2}-\d{2})
  | (?P<NUMBER>-?\d+(?:\.\d+)?)
  | (?P<IDENT>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<OP>!=|<=|>=|=|<|>)
  | (?P<LPAREN>\()
  | (?P<RPAREN>\))
  | (?P<COMMA>,)
  | (?P<DOT>\.)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


@dataclass(frozen=True)
class FieldRef:
    """A field path resolved to a concrete table column."""

    table: str
    column: str
    kind: str
    raw: str  # as written (lowercased), qualification preserved


@dataclass(frozen=True)
class Lit:
    kind: str  # string | number | date | bool
    value: object

    def render(self) -> str:
        if self.kind == "string":
            escaped = str(self.value).replace("\\", "\\\\").replace('"', '\\"')
            return f'"{escaped}"'
        if self.kind == "bool":
            return "TRUE" if self.value else "FALSE"
        if self.kind == "number":
            v = self.value
            if isinstance(v, float) and v.is_integer():
                return str(int(v))
            return repr(v) if isinstance(v, float) else str(v)
        return str(self.value)  # date


@dataclass(frozen=True)
class Cmp:
    field: FieldRef
    op: str
    literal: Lit


@dataclass(frozen=True)
class InList:
    field: FieldRef
    literals: tuple[Lit, ...]


@dataclass(frozen=True)
class IsNull:
    field: FieldRef
    negated: bool


@dataclass(frozen=True)
class NotExpr:
    child: "Pred"


@dataclass(frozen=True)
class AndExpr:
    children: tuple["Pred", ...]


@dataclass(frozen=True)
class OrExpr:
    children: tuple["Pred", ...]


@dataclass(frozen=True)
class TrueExpr:
    pass


Pred = Union[Cmp, InList, IsNull, NotExpr, AndExpr, OrExpr, TrueExpr]


@dataclass
class CohortQuery:
    raw_text: str
    canonical_text: str
    kind: str  # select_cases | count_by
    where: Pred | None = None
    by: FieldRef | None = None


# --- schema-aware field resolution ----------------------------------------------


@dataclass
class QuerySchema:
    """Resolution context: the snapshot's tables and their case linkage."""

    tables: dict[str, TableDefinition]
    case_table: str
    one_to_one_children: list[str] = dc_field(default_factory=list)

    @classmethod
    def from_tables(cls, tables: dict[str, TableDefinition]) -> "QuerySchema":
        case_table = next(
            (name for name, t in tables.items() if t.parent_key is None), None
        )
        if case_table is None:
            raise ValueError("no case table (every table has a parent)")
        children = sorted(
            name
            for name, t in tables.items()
            if t.parent_key
            and t.parent_key[1] == case_table
            and t.parent_multiplicity == "one_to_one"
        )
        return cls(tables=tables, case_table=case_table, one_to_one_children=children)

    def resolve(self, raw: str) -> FieldRef:
        """Resolve ``[entity.]field``. Unqualified names try the case table,
        then the case's one-to-one children; ambiguity is an error."""
        raw = raw.lower()
        if "." in raw:
            entity, _, column = raw.partition(".")
            table = self.tables.get(entity)
            if table is None:
                raise UnknownFieldError(f"unknown table {entity!r} in field path {raw!r}")
            col = table.column(column)
            if col is None:
                raise UnknownFieldError(f"table {entity!r} has no column {column!r}")
            return FieldRef(entity, column, col.kind, raw)
        case = self.tables[self.case_table]
        col = case.column(raw)
        if col is not None:
            return FieldRef(self.case_table, raw, col.kind, raw)
        hits = []
        for child in self.one_to_one_children:
            ccol = self.tables[child].column(raw)
            if ccol is not None:
                hits.append((child, ccol))
        if len(hits) == 1:
            return FieldRef(hits[0][0], raw, hits[0][1].kind, raw)
        if len(hits) > 1:
            names = ", ".join(f"{t}.{raw}" for t, _ in hits)
            raise UnknownFieldError(f"field {raw!r} is ambiguous ({names})")
        raise UnknownFieldError(f"field {raw!r} not found in the case table or its "
                                f"one-to-one children")

    def resolve_report_field(self, name: str) -> FieldRef:
        """Looser resolution for stats reports: after the standard rule fails,
        accept a field that exists in exactly one table anywhere."""
        try:
            return self.resolve(name)
        except UnknownFieldError:
            pass
        name_l = name.lower()
        hits = [
            (t_name, col)
            for t_name, t in sorted(self.tables.items())
            if (col := t.column(name_l)) is not None
        ]
        if len(hits) == 1:
            return FieldRef(hits[0][0], name_l, hits[0][1].kind, f"{hits[0][0]}.{name_l}")
        if not hits:
            raise UnknownFieldError(f"field {name!r} not found in any table")
        names = ", ".join(f"{t}.{name_l}" for t, _ in hits)
        raise UnknownFieldError(f"field {name!r} is ambiguous ({names})")


# --- tokenizer -------------------------------------------------------------------


def _tokenize(text: str) -> list[Token]:
    out: list[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup or ""
        if kind != "WS":
            out.append(Token(kind, m.group(), pos))
        pos = m.end()
    out.append(Token("EOF", "", len(text)))
    return out


def _unescape(quoted: str) -> str:
    inner = quoted[1:-1]
    return re.sub(r"\\(.)", r"\1", inner)


# --- parser ----------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, schema: QuerySchema):
        self.text = text
        self.schema = schema
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_keyword(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.text.lower() in words

    def expect_keyword(self, word: str) -> Token:
        tok = self.next()
        if tok.kind != "IDENT" or tok.text.lower() != word:
            raise ParseError(f"expected {word.upper()}, got {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def expect(self, kind: str, what: str) -> Token:
        tok = self.next()
        if tok.kind != kind:
            raise ParseError(f"expected {what}, got {tok.text or 'end of input'!r}", tok.pos)
        return tok

    # query := SELECT CASES WHERE pred | COUNT CASES BY field [WHERE pred]
    def parse_query(self) -> tuple[str, Pred | None, FieldRef | None]:
        if self.at_keyword("select"):
            self.next()
            self.expect_keyword("cases")
            self.expect_keyword("where")
            where = self.parse_pred()
            self._expect_eof()
            return "select_cases", where, None
        if self.at_keyword("count"):
            self.next()
            self.expect_keyword("cases")
            self.expect_keyword("by")
            by = self.parse_fieldpath()
            where = None
            if self.at_keyword("where"):
                self.next()
                where = self.parse_pred()
            self._expect_eof()
            return "count_by", where, by
        tok = self.peek()
        raise ParseError("query must start with SELECT CASES or COUNT CASES", tok.pos)

    def _expect_eof(self) -> None:
        tok = self.peek()
        if tok.kind != "EOF":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.pos)

    def parse_pred(self) -> Pred:
        children = [self.parse_and()]
        while self.at_keyword("or"):
            self.next()
            children.append(self.parse_and())
        return children[0] if len(children) == 1 else OrExpr(tuple(children))

    def parse_and(self) -> Pred:
        children = [self.parse_unary()]
        while self.at_keyword("and"):
            self.next()
            children.append(self.parse_unary())
        return children[0] if len(children) == 1 else AndExpr(tuple(children))

    def parse_unary(self) -> Pred:
        if self.at_keyword("not"):
            self.next()
            return NotExpr(self.parse_unary())
        if self.peek().kind == "LPAREN":
            self.next()
            inner = self.parse_pred()
            self.expect("RPAREN", "')'")
            return inner
        if self.at_keyword("true"):
            self.next()
            return TrueExpr()
        return self.parse_cmp()

    def parse_fieldpath(self) -> FieldRef:
        tok = self.expect("IDENT", "a field path")
        if tok.text.lower() in _KEYWORDS:
            raise ParseError(f"expected a field path, got keyword {tok.text!r}", tok.pos)
        raw = tok.text.lower()
        if self.peek().kind == "DOT":
            self.next()
            col = self.expect("IDENT", "a column name")
            raw = f"{raw}.{col.text.lower()}"
        try:
            return self.schema.resolve(raw)
        except UnknownFieldError:
            raise

    def parse_cmp(self) -> Pred:
        field_tok = self.peek()
        fieldref = self.parse_fieldpath()
        tok = self.peek()
        if tok.kind == "OP":
            self.next()
            literal = self.parse_literal()
            _check_types(fieldref, tok.text, literal, field_tok.pos)
            return Cmp(fieldref, tok.text, literal)
        if self.at_keyword("in"):
            self.next()
            self.expect("LPAREN", "'('")
            literals = [self.parse_literal()]
            while self.peek().kind == "COMMA":
                self.next()
                literals.append(self.parse_literal())
            self.expect("RPAREN", "')'")
            for lit in literals:
                _check_types(fieldref, "=", lit, field_tok.pos)
            return InList(fieldref, tuple(literals))
        if self.at_keyword("is"):
            self.next()
            negated = False
            if self.at_keyword("not"):
                self.next()
                negated = True
            self.expect_keyword("null")
            return IsNull(fieldref, negated)
        raise ParseError(f"expected an operator after {fieldref.raw!r}", tok.pos)

    def parse_literal(self) -> Lit:
        tok = self.next()
        if tok.kind == "STRING":
            return Lit("string", _unescape(tok.text))
        if tok.kind == "DATE":
            return Lit("date", tok.text)
        if tok.kind == "NUMBER":
            if "." in tok.text:
                return Lit("number", float(tok.text))
            return Lit("number", int(tok.text))
        if tok.kind == "IDENT" and tok.text.lower() in ("true", "false"):
            return Lit("bool", tok.text.lower() == "true")
        raise ParseError(f"expected a literal, got {tok.text or 'end of input'!r}", tok.pos)


_COMPATIBLE = {
    "string": ("string", "enum"),
    "number": ("integer", "number"),
    "date": ("date",),
    "bool": ("boolean",),
}


def _check_types(fieldref: FieldRef, op: str, literal: Lit, pos: int) -> None:
    if fieldref.kind not in _COMPATIBLE[literal.kind]:
        raise TypeMismatchError(
            f"{literal.render()} ({literal.kind}) cannot be compared with "
            f"{fieldref.raw} ({fieldref.kind})"
        )
    if op in ORDER_OPS:
        if fieldref.kind == "enum":
            raise TypeMismatchError(f"ordering comparison not defined for enum field {fieldref.raw}")
        if fieldref.kind == "boolean":
            raise TypeMismatchError(f"ordering comparison not defined for boolean field {fieldref.raw}")


# --- canonical rendering ------------------------------------------------------------


def render_pred(p: Pred) -> str:
    if isinstance(p, TrueExpr):
        return "TRUE"
    if isinstance(p, Cmp):
        return f"{p.field.raw} {p.op} {p.literal.render()}"
    if isinstance(p, InList):
        return f"{p.field.raw} IN ({', '.join(lit.render() for lit in p.literals)})"
    if isinstance(p, IsNull):
        return f"{p.field.raw} IS {'NOT ' if p.negated else ''}NULL"
    if isinstance(p, NotExpr):
        child = render_pred(p.child)
        if isinstance(p.child, (AndExpr, OrExpr)):
            child = f"({child})"
        return f"NOT {child}"
    if isinstance(p, AndExpr):
        parts = []
        for child in p.children:
            text = render_pred(child)
            if isinstance(child, OrExpr):
                text = f"({text})"
            parts.append(text)
        return " AND ".join(parts)
    if isinstance(p, OrExpr):
        return " OR ".join(render_pred(child) for child in p.children)
    raise TypeError(f"unknown predicate node {p!r}")


def render_query(kind: str, where: Pred | None, by: FieldRef | None) -> str:
    if kind == "select_cases":
        return f"SELECT CASES WHERE {render_pred(where)}"
    text = f"COUNT CASES BY {by.raw}"
    if where is not None:
        text += f" WHERE {render_pred(where)}"
    return text


def parse_query(text: str, schema: QuerySchema) -> CohortQuery:
    """Parse CQL text against a schema into a canonicalized query.

    Raises ParseError (with character position), UnknownFieldError, or
    TypeMismatchError.
    """
    kind, where, by = _Parser(text, schema).parse_query()
    return CohortQuery(
        raw_text=text,
        canonical_text=render_query(kind, where, by),
        kind=kind,
        where=where,
        by=by,
    )
