"""Schema dictionary: entity definitions that drive the crawler and warehouse.

A dictionary declares entities (case, clinical, biospecimen, file categories),
their typed properties, and parent->child links. The text format is a small
line-oriented language documented in ``docs/dictionary-format.md``; it is
deliberately indentation-free so a hand-rolled parser with precise line
numbers can read and round-trip it.

Loaded dictionaries are immutable: share them freely across threads.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from datetime import date
from typing import Any, BinaryIO

from .errors import DictionarySyntaxError, DictionaryValidationError

KINDS = ("string", "integer", "number", "boolean", "date", "enum")
CATEGORIES = ("case", "clinical", "biospecimen", "file")
MULTIPLICITIES = ("one_to_one", "one_to_many")

_IDENT_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_COMMENT_RE = re.compile(r"(^|\s)#.*$")


@dataclass(frozen=True)
class PropertySpec:
    """One typed property of an entity.

    ``enum_values`` is non-empty exactly when ``kind == "enum"``. Enum
    comparison is case-insensitive everywhere, but values are stored verbatim.
    """

    name: str
    kind: str
    enum_values: tuple[str, ...] = ()
    nullable: bool = True

    def enum_folded(self) -> frozenset[str]:
        return frozenset(v.casefold() for v in self.enum_values)


@dataclass(frozen=True)
class LinkSpec:
    """Parent->child edge. ``name`` is the document key the children nest under."""

    name: str
    target_entity: str
    multiplicity: str
    required: bool = False


@dataclass
class EntitySchema:
    """One entity: its category, properties, outgoing links, and unique key."""

    name: str
    category: str
    id_property: str
    properties: dict[str, PropertySpec] = field(default_factory=dict)
    links: list[LinkSpec] = field(default_factory=list)

    def link(self, name: str) -> LinkSpec | None:
        for lk in self.links:
            if lk.name == name:
                return lk
        return None


@dataclass
class DataDictionary:
    """A validated set of entities forming a tree rooted at the case entity."""

    version: str
    entities: dict[str, EntitySchema]

    @property
    def case_entity(self) -> EntitySchema:
        for ent in self.entities.values():
            if ent.category == "case":
                return ent
        raise LookupError("dictionary has no case entity")  # unreachable post-load

    def parent_of(self, entity_name: str) -> tuple[str, LinkSpec] | None:
        """Return (parent entity name, link) for a non-case entity, else None."""
        for ent in self.entities.values():
            for lk in ent.links:
                if lk.target_entity == entity_name:
                    return ent.name, lk
        return None


@dataclass(frozen=True)
class Violation:
    """One conformance problem in a document: where and why."""

    path: str
    reason: str


# --- parsing --------------------------------------------------------------


def _strip_comment(line: str) -> str:
    return _COMMENT_RE.sub("", line).strip()


def _check_ident(name: str, what: str, lineno: int) -> str:
    if not _IDENT_RE.match(name):
        raise DictionarySyntaxError(f"invalid {what} name {name!r}", lineno)
    return name


def _parse_kind(text: str, lineno: int) -> tuple[str, tuple[str, ...], bool]:
    """Parse '<kind> [required]' where kind may be 'enum[v1, v2, ...]'."""
    text = text.strip()
    nullable = True
    if text.endswith(" required"):
        nullable = False
        text = text[: -len(" required")].strip()
    elif text.endswith(" nullable"):
        text = text[: -len(" nullable")].strip()
    if text.startswith("enum[") and text.endswith("]"):
        inner = text[len("enum[") : -1]
        values = tuple(v.strip() for v in inner.split(","))
        if not values or any(not v for v in values):
            raise DictionarySyntaxError("enum needs at least one non-empty value", lineno)
        return "enum", values, nullable
    if text not in KINDS or text == "enum":
        raise DictionarySyntaxError(f"unknown property kind {text!r}", lineno)
    return text, (), nullable


def load_dictionary(source: BinaryIO | bytes | str) -> DataDictionary:
    """Parse and fully validate dictionary text.

    Accepts a binary stream, raw bytes, or a string. Raises
    :class:`DictionarySyntaxError` (with line number) for malformed text and
    :class:`DictionaryValidationError` (naming the offending entity) for
    broken invariants: dangling link targets, missing or mistyped id
    properties, zero or multiple case entities, multiple parents, link cycles.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read().decode("utf-8")

    version: str | None = None
    entities: dict[str, EntitySchema] = {}
    current: EntitySchema | None = None
    issues: list[str] = []
    saw_content = False

    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        saw_content = True

        if line.startswith("version:"):
            if version is not None:
                raise DictionarySyntaxError("duplicate version line", lineno)
            version = line[len("version:") :].strip()
            if not version:
                raise DictionarySyntaxError("empty version", lineno)
            continue

        if line.startswith("entity ") and line.endswith(":"):
            name = _check_ident(line[len("entity ") : -1].strip(), "entity", lineno)
            if name in entities:
                raise DictionarySyntaxError(f"duplicate entity {name!r}", lineno)
            current = EntitySchema(name=name, category="", id_property="")
            entities[name] = current
            continue

        if current is None:
            raise DictionarySyntaxError(f"directive outside an entity block: {line!r}", lineno)

        if line.startswith("category:"):
            value = line[len("category:") :].strip()
            if value not in CATEGORIES:
                raise DictionarySyntaxError(f"unknown category {value!r}", lineno)
            current.category = value
        elif line.startswith("id_property:"):
            current.id_property = _check_ident(
                line[len("id_property:") :].strip(), "property", lineno
            )
        elif line.startswith("property "):
            head, sep, rest = line[len("property ") :].partition(":")
            if not sep:
                raise DictionarySyntaxError("property needs '<name>: <kind>'", lineno)
            pname = _check_ident(head.strip(), "property", lineno)
            kind, enum_values, nullable = _parse_kind(rest, lineno)
            if pname in current.properties:
                issues.append(f"{current.name}: duplicate property {pname!r}")
                continue
            current.properties[pname] = PropertySpec(pname, kind, enum_values, nullable)
        elif line.startswith("link "):
            head, sep, rest = line[len("link ") :].partition(":")
            if not sep:
                raise DictionarySyntaxError("link needs '<name>: <target> <multiplicity>'", lineno)
            lname = _check_ident(head.strip(), "link", lineno)
            parts = rest.split()
            if len(parts) not in (2, 3) or parts[1] not in MULTIPLICITIES:
                raise DictionarySyntaxError(
                    "link needs '<target> one_to_one|one_to_many [required]'", lineno
                )
            required = False
            if len(parts) == 3:
                if parts[2] != "required":
                    raise DictionarySyntaxError(f"unknown link modifier {parts[2]!r}", lineno)
                required = True
            target = _check_ident(parts[0], "entity", lineno)
            if current.link(lname) is not None:
                issues.append(f"{current.name}: duplicate link {lname!r}")
                continue
            current.links.append(LinkSpec(lname, target, parts[1], required))
        else:
            raise DictionarySyntaxError(f"unrecognised line: {line!r}", lineno)

    if not saw_content:
        raise DictionarySyntaxError("empty dictionary", 1)
    if version is None:
        raise DictionarySyntaxError("missing version line", 1)

    issues.extend(_validate_structure(entities))
    if issues:
        raise DictionaryValidationError(issues)
    return DataDictionary(version=version, entities=entities)


def _validate_structure(entities: dict[str, EntitySchema]) -> list[str]:
    issues: list[str] = []
    case_entities = [e.name for e in entities.values() if e.category == "case"]
    if len(case_entities) != 1:
        issues.append(
            f"dictionary must declare exactly one case entity, found {len(case_entities)}"
            + (f" ({', '.join(case_entities)})" if case_entities else "")
        )

    parents: dict[str, list[str]] = {}
    for ent in entities.values():
        if not ent.category:
            issues.append(f"{ent.name}: missing category")
        if not ent.id_property:
            issues.append(f"{ent.name}: missing id_property")
        else:
            prop = ent.properties.get(ent.id_property)
            if prop is None:
                issues.append(f"{ent.name}: id_property {ent.id_property!r} is not a property")
            elif prop.kind != "string" or prop.nullable:
                issues.append(
                    f"{ent.name}: id_property {ent.id_property!r} must be a required string"
                )
        for prop in ent.properties.values():
            if prop.kind == "enum" and len(set(v.casefold() for v in prop.enum_values)) != len(
                prop.enum_values
            ):
                issues.append(f"{ent.name}: enum property {prop.name!r} repeats values")
        for lk in ent.links:
            if lk.name in ent.properties:
                issues.append(f"{ent.name}: link {lk.name!r} collides with a property name")
            if lk.target_entity not in entities:
                issues.append(f"{ent.name}: link target {ent.name}.{lk.target_entity} undefined")
            else:
                parents.setdefault(lk.target_entity, []).append(ent.name)
            if lk.target_entity == ent.name:
                issues.append(f"{ent.name}: entity links to itself")

    for name, ps in parents.items():
        if len(ps) > 1:
            issues.append(f"{name}: linked from multiple parents ({', '.join(sorted(ps))})")
        elif name in entities:
            # The parent's id property becomes the child's foreign-key column;
            # a declared property with the same name would be ambiguous.
            parent_id = entities[ps[0]].id_property
            if parent_id and parent_id in entities[name].properties:
                issues.append(
                    f"{name}: property {parent_id!r} collides with the parent key column"
                )
    for ent in entities.values():
        if ent.category == "case" and ent.name in parents:
            issues.append(f"{ent.name}: case entity may not be a link target")

    if issues:
        return issues

    # Walk the tree from the case entity: everything must be reachable, no cycles.
    root = case_entities[0]
    seen: set[str] = set()
    stack = [root]
    while stack:
        name = stack.pop()
        if name in seen:
            issues.append(f"{name}: link cycle detected")
            return issues
        seen.add(name)
        stack.extend(lk.target_entity for lk in entities[name].links)
    unreachable = sorted(set(entities) - seen)
    for name in unreachable:
        issues.append(f"{name}: not reachable from case entity {root!r}")
    return issues


def dump_dictionary(d: DataDictionary) -> str:
    """Render a dictionary back to its text form (load(dump(d)) == d)."""
    out = [f"version: {d.version}", ""]
    for ent in d.entities.values():
        out.append(f"entity {ent.name}:")
        out.append(f"category: {ent.category}")
        out.append(f"id_property: {ent.id_property}")
        for prop in ent.properties.values():
            kind = prop.kind
            if prop.kind == "enum":
                kind = "enum[" + ", ".join(prop.enum_values) + "]"
            suffix = "" if prop.nullable else " required"
            out.append(f"property {prop.name}: {kind}{suffix}")
        for lk in ent.links:
            suffix = " required" if lk.required else ""
            out.append(f"link {lk.name}: {lk.target_entity} {lk.multiplicity}{suffix}")
        out.append("")
    return "\n".join(out)


# --- document validation ---------------------------------------------------


def check_scalar(prop: PropertySpec, value: Any) -> str | None:
    """Return a reason string if ``value`` does not fit ``prop``, else None."""
    if prop.kind == "string":
        if not isinstance(value, str):
            return f"expected string, got {type(value).__name__}"
    elif prop.kind == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            return f"expected integer, got {type(value).__name__}"
    elif prop.kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return f"expected number, got {type(value).__name__}"
    elif prop.kind == "boolean":
        if not isinstance(value, bool):
            return f"expected boolean, got {type(value).__name__}"
    elif prop.kind == "date":
        if not isinstance(value, str) or not _DATE_RE.match(value):
            return "expected ISO date YYYY-MM-DD"
        try:
            date.fromisoformat(value)
        except ValueError:
            return f"not a calendar date: {value!r}"
    elif prop.kind == "enum":
        if not isinstance(value, str):
            return f"expected enum string, got {type(value).__name__}"
        if value.casefold() not in prop.enum_folded():
            allowed = ", ".join(prop.enum_values)
            return f"value {value!r} not in enum {{{allowed}}}"
    return None


def validate_document(
    d: DataDictionary, entity: str, doc: Any, _prefix: str = ""
) -> list[Violation]:
    """Check a nested document against an entity schema.

    Returns an empty list iff the document conforms: property types match,
    non-nullable properties are present and non-null, enum values are members
    (case-insensitive), and linked children have the right shape. Violations
    carry the field path (``demographic.gender``, ``diagnoses[1].tumor_grade``).
    Properties in the document but not in the dictionary are not violations;
    the crawler preserves them as extra columns. The document is never mutated.
    """
    ent = d.entities[entity]
    out: list[Violation] = []
    if not isinstance(doc, dict):
        return [Violation(_prefix or entity, f"expected an object, got {type(doc).__name__}")]

    for prop in ent.properties.values():
        path = _prefix + prop.name
        if prop.name not in doc:
            if not prop.nullable:
                out.append(Violation(path, "missing non-nullable property"))
            continue
        value = doc[prop.name]
        if value is None:
            if not prop.nullable:
                out.append(Violation(path, "null value for non-nullable property"))
            continue
        reason = check_scalar(prop, value)
        if reason:
            out.append(Violation(path, reason))

    for lk in ent.links:
        path = _prefix + lk.name
        value = doc.get(lk.name)
        if value is None:
            if lk.required:
                out.append(Violation(path, "missing required link"))
            continue
        if lk.multiplicity == "one_to_one":
            if not isinstance(value, dict):
                out.append(Violation(path, "one_to_one link must be a single object"))
                continue
            out.extend(validate_document(d, lk.target_entity, value, path + "."))
        else:
            if not isinstance(value, list):
                out.append(Violation(path, "one_to_many link must be a list"))
                continue
            if lk.required and not value:
                out.append(Violation(path, "required link has no children"))
            for i, child in enumerate(value):
                if not isinstance(child, dict):
                    out.append(Violation(f"{path}[{i}]", "child must be an object"))
                    continue
                out.extend(validate_document(d, lk.target_entity, child, f"{path}[{i}]."))
    return out
