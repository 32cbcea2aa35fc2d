from __future__ import annotations

import json
from pathlib import Path

import pytest

from minds import packaged_dictionary
from minds.dictionary import DataDictionary, load_dictionary
from minds.ingest import IngestRecord, SourceDescriptor, StagingStore
from minds.snapshots import CatalogStore


@pytest.fixture(scope="session")
def gdc_dict() -> DataDictionary:
    with open(packaged_dictionary("gdc_minimal"), "rb") as f:
        return load_dictionary(f)


@pytest.fixture(scope="session")
def tiny_dict() -> DataDictionary:
    with open(packaged_dictionary("tiny"), "rb") as f:
        return load_dictionary(f)


class Pipeline:
    """A staging store + catalog pair over one local drop directory."""

    def __init__(self, root: Path):
        self.drop = root / "drop"
        self.drop.mkdir(parents=True, exist_ok=True)
        self.staging = StagingStore(root / "staging")
        self.catalog = CatalogStore(root / "catalog")
        self.staging.register_source(
            SourceDescriptor(source_id="drop", kind="local_directory", locator=str(self.drop))
        )

    def write(self, name: str, payload: bytes | str | dict | list) -> Path:
        path = self.drop / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(payload, (dict, list)):
            path.write_text(json.dumps(payload, indent=1), "utf-8")
        elif isinstance(payload, str):
            path.write_text(payload, "utf-8")
        else:
            path.write_bytes(payload)
        return path

    def stage(self) -> list[IngestRecord]:
        delta, result = self.staging.ingest_once("drop")
        return result.records


@pytest.fixture()
def pipeline(tmp_path: Path) -> Pipeline:
    return Pipeline(tmp_path)
