"""
Result writers.

CSV rows are written with `repr` floats so every value round-trips in
full double precision, independent of locale. One writer per file.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """
    Write a CSV file with a single header row.

    Args:
        path: Destination file; parent directories are created.
        header: Column names.
        rows: Row sequences, each the same length as `header`.

    Returns:
        The written path.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
            writer.writerow([_cell(v) for v in row])
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    """Write `payload` as indented, key-sorted JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def dumps(payload: Dict[str, Any]) -> str:
    """Serialize `payload` the same way `write_json` does, for stdout."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True)


def write_manifest(
    out_dir: Path,
    scenario: str,
    config: Dict[str, Any],
    files: List[str],
    schema_version: int,
    csv_schema_version: int,
) -> Path:
    """Record what a scenario produced, with the resolved config."""
    return write_json(
        out_dir / "manifest.json",
        {
            "scenario": scenario,
            "schema_version": schema_version,
            "csv_schema_version": csv_schema_version,
            "config": config,
            "files": sorted(files),
        },
    )
