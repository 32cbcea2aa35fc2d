"""Exception hierarchy shared across the package.

Every error raised by minds derives from :class:`MindsError` so callers can
catch one base type at process boundaries (CLI, service). Errors that carry
structured context (line numbers, field paths, attempt counts) expose it as
attributes in addition to the message.
"""

from __future__ import annotations


class MindsError(Exception):
    """Base class for all errors raised by this package."""


# --- dictionary ---------------------------------------------------------


class DictionarySyntaxError(MindsError):
    """Malformed dictionary text. Carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DictionaryValidationError(MindsError):
    """Structurally parseable dictionary that breaks an invariant.

    ``issues`` lists every problem found; the message names the first.
    """

    def __init__(self, issues: list[str]):
        first = issues[0] if issues else "invalid dictionary"
        more = f" (+{len(issues) - 1} more)" if len(issues) > 1 else ""
        super().__init__(first + more)
        self.issues = issues


# --- ingest --------------------------------------------------------------


class UnreachableSource(MindsError):
    """Source locator did not answer a probe (missing directory, dead URL)."""


class DuplicateSourceId(MindsError):
    """A source id is already registered with a different kind or locator."""


# --- crawler -------------------------------------------------------------


class UnclassifiableError(MindsError):
    """File format could not be detected (neither JSON nor TSV)."""


class TypeCoercionError(MindsError):
    """A value could not be coerced to its declared property kind."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class SchemaConflictError(MindsError):
    """Same column declared with incompatible kinds across sources."""


# --- warehouse / query ---------------------------------------------------


class ParseError(MindsError):
    """CQL text rejected by the parser. ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownFieldError(MindsError):
    """Field path that resolves to no table column, or ambiguously."""


class TypeMismatchError(MindsError):
    """Literal type incompatible with the field's declared kind."""


class SnapshotMismatch(MindsError):
    """Requested incremental load but the snapshot lineage chain is broken."""


# --- repoclient ----------------------------------------------------------


class RepoUnavailable(MindsError):
    """Repository endpoint unreachable after the retry policy was exhausted."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(MindsError):
    """Repository answered with a malformed payload."""


class TruncatedBody(MindsError):
    """Connection closed before the declared Content-Length was served."""


class PortInUse(MindsError):
    """Fixture server could not bind its port."""


class CorruptCorpus(MindsError):
    """Fixture corpus index is malformed."""


# --- cohort --------------------------------------------------------------


class UnknownVersion(MindsError):
    """version_id absent from the version registry."""


class SnapshotMissing(MindsError):
    """A version references a snapshot that is not in the snapshot store."""


class ReproducibilityError(MindsError):
    """Regeneration produced a different dataset than the recorded version."""


# --- config / synthgen ---------------------------------------------------


class ConfigError(MindsError):
    """Bad configuration value. Names the offending key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class SpecError(MindsError):
    """Corpus spec inconsistent with itself or with the dictionary."""
