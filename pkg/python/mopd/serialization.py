# Copyright © 2024 MoPD Lab Contributors.

"""Canonical JSON artifacts.

Every artifact written by the lab is a JSON document of the form
``{"kind": ..., "payload": ..., "sha256": ...}`` where the hash is taken over
the canonical encoding of the payload. Arrays are stored as nested lists of
Python floats; ``json`` renders floats with the shortest representation that
round-trips, so decoding reproduces every float64 bit for bit.
"""

import csv
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from mopd.errors import ArtifactMismatch, ConfigError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_jsonable(value: Any) -> Any:
    """Convert arrays, numpy scalars and enums inside ``value`` to plain JSON
    types."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float) and not np.isfinite(value):
        raise ValueError(f"Cannot serialize non-finite value {value}.")
    return value


def array_from_json(value: Any, ndim: Optional[int] = None, name: str = "array") -> np.ndarray:
    """Decode a nested list into a float64 array, checking its rank."""
    try:
        a = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"not a numeric array ({e})", field=name) from e
    if ndim is not None and a.ndim != ndim:
        raise ConfigError(f"expected a {ndim}-d array, got shape {a.shape}", field=name)
    if not np.all(np.isfinite(a)):
        raise ConfigError("array entries must be finite", field=name)
    return a


def canonical_dumps(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, one-space indent, trailing
    newline."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def content_hash(obj: Any) -> str:
    """sha256 of the canonical encoding of ``obj``."""
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()


def file_hash(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def loads(text: str, source: str = "<string>") -> Any:
    """Parse JSON text, reporting syntax errors with their line and column."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {source}: {e.msg}", line=e.lineno, column=e.colno) from e


def load_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return loads(path.read_text(encoding="utf-8"), source=str(path))


def write_json(path: PathLike, obj: Any) -> str:
    """Write ``obj`` canonically to ``path`` and return the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = canonical_dumps(obj)
    path.write_text(text, encoding="utf-8")
    logger.debug("Wrote %s", path)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_artifact(path: PathLike, kind: str, payload: Any) -> str:
    """Write a hashed artifact and return the payload hash."""
    payload = to_jsonable(payload)
    digest = content_hash(payload)
    write_json(path, {"kind": kind, "payload": payload, "sha256": digest})
    return digest


def read_artifact(path: PathLike, kind: str):
    """Read an artifact written by :func:`write_artifact`.

    Returns:
        tuple: ``(payload, sha256)``.

    Raises:
        ConfigError: if the file is not a ``kind`` artifact.
        ArtifactMismatch: if the stored hash does not match the payload.
    """
    doc = load_json(path)
    if not isinstance(doc, dict) or not {"kind", "payload", "sha256"} <= doc.keys():
        raise ConfigError(f"{path} is not a mopd artifact")
    if doc["kind"] != kind:
        raise ConfigError(f"expected a {kind} artifact, got {doc['kind']}", field="kind")
    digest = content_hash(doc["payload"])
    if digest != doc["sha256"]:
        raise ArtifactMismatch(f"{path} is corrupted: payload hash {digest} != {doc['sha256']}.")
    return doc["payload"], digest


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write a CSV file with floats rendered by ``repr``; returns its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fid:
        writer = csv.writer(fid, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_render_cell(v) for v in row])
    return file_hash(path)


def _render_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return "" if value is None else str(value)
