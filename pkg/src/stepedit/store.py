"""Versioned container for named float64 arrays plus a JSON header.

Files are ``.npz`` archives holding the arrays and one ``__header__`` entry.
Writes go to a temporary file that is renamed into place, so a reader never
sees a half-written checkpoint.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from stepedit.errors import CheckpointError

HEADER_KEY = "__header__"


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if HEADER_KEY in arrays:
        raise ValueError(f"array name {HEADER_KEY!r} is reserved")
    payload = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_arrays(path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, checking ``header['kind']`` and ``header['version']``.

    Everything is read into memory before returning; any failure raises
    :class:`CheckpointError` and nothing is handed back.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: np.array(data[k]) for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    raw = arrays.pop(HEADER_KEY, None)
    if raw is None:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw.tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise CheckpointError(
            f"{path}: schema version {header.get('version')} is not supported (expected {version}); "
            "re-create the file with this version of stepedit"
        )
    return header, arrays
