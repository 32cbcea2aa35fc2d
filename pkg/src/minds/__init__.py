"""Metadata lakehouse for multimodal oncology data.

Three stages: delta ingest into a content-addressed staging store, a
dictionary-driven crawler that flattens staged files into immutable catalog
snapshots, and a serving layer (embedded cohort query engine, versioned
dataset manifests, repository download clients).
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def packaged_dictionary(name: str = "gdc_minimal") -> Path:
    """Path to one of the dictionaries shipped with the package."""
    return Path(str(resources.files("minds") / "data" / "dictionaries" / f"{name}.dict"))


def packaged_corpus_spec() -> Path:
    """Path to the default synthetic-corpus spec shipped with the package."""
    return Path(str(resources.files("minds") / "data" / "default_corpus_spec.json"))
