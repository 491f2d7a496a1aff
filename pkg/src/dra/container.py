"""Versioned named-array container.

A container is a numpy ``.npz`` archive. Besides the user arrays it holds
two reserved entries:

``__meta__``
    UTF-8 JSON document (stored as a uint8 array) with keys
    ``format_version``, ``kind``, ``config`` (the config echo) and
    ``checksum`` (sha256 over every array name, dtype, shape and bytes).
``__format__``
    the format version as a 0-d int64 array, readable without JSON.

Readers accept any file whose major version equals ``FORMAT_MAJOR``.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import DRAError

FORMAT_MAJOR = 1
FORMAT_MINOR = 0
FORMAT_VERSION = f"{FORMAT_MAJOR}.{FORMAT_MINOR}"

_RESERVED = ("__meta__", "__format__")


class ContainerError(DRAError):
    """Base class for container read failures."""


class IncompatibleVersionError(ContainerError):
    pass


class IntegrityError(ContainerError):
    pass


def _checksum(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_container(path: str | Path, arrays: Mapping[str, np.ndarray],
                   config: Mapping[str, Any], kind: str) -> None:
    for name in arrays:
        if name in _RESERVED:
            raise ValueError(f"array name {name!r} is reserved")
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "checksum": _checksum(arrays),
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, __format__=np.asarray(FORMAT_MAJOR, dtype=np.int64), **arrays)


def load_container(path: str | Path, kind: str | None = None
                   ) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(arrays, meta)``; raises on version or checksum mismatch."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise IntegrityError(f"{path}: unreadable container ({exc})") from exc
    if "__meta__" not in data:
        raise IntegrityError(f"{path}: missing metadata block")
    try:
        meta = json.loads(data.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt metadata ({exc})") from exc
    data.pop("__format__", None)
    version = str(meta.get("format_version", "0.0"))
    if version.split(".")[0] != str(FORMAT_MAJOR):
        raise IncompatibleVersionError(
            f"{path}: format {version} is not readable by {FORMAT_VERSION}")
    if kind is not None and meta.get("kind") != kind:
        raise IncompatibleVersionError(f"{path}: expected a {kind!r} container, got {meta.get('kind')!r}")
    if _checksum(data) != meta.get("checksum"):
        raise IntegrityError(f"{path}: checksum mismatch")
    return data, meta
