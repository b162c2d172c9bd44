"""Versioned, byte-reproducible archives of named arrays plus JSON metadata.

An archive is a zip file (stored, fixed timestamps) holding ``meta.json``
and one ``.npy`` member per array.  Each array carries a SHA-256 digest in
the metadata so that corruption is caught before any state is built.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    np.lib.format.write_array(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, kind: str, meta: dict, arrays: dict) -> Path:
    """Write ``arrays`` and ``meta`` atomically; the same inputs give the same bytes."""
    path = Path(path)
    index = {}
    payload = {}
    for name in sorted(arrays):
        data = _npy_bytes(np.asarray(arrays[name]))
        index[name] = hashlib.sha256(data).hexdigest()
        payload[name] = data
    header = {"format_version": FORMAT_VERSION, "kind": kind, "arrays": index, "meta": meta}
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(tmp, "w") as zf:
            zf.writestr(_member("meta.json"), json.dumps(header, sort_keys=True, indent=1))
            for name, data in payload.items():
                zf.writestr(_member(f"arrays/{name}.npy"), data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def read_archive(path, kind: str | None = None):
    """Return ``(meta, arrays)``; raises :class:`CheckpointError` on any defect."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            version = header.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: archive format version {version} is not supported "
                    f"(expected {FORMAT_VERSION})")
            if kind is not None and header.get("kind") != kind:
                raise CheckpointError(f"{path}: expected a {kind!r} archive, found {header.get('kind')!r}")
            arrays = {}
            for name, digest in header["arrays"].items():
                data = zf.read(f"arrays/{name}.npy")
                if hashlib.sha256(data).hexdigest() != digest:
                    raise CheckpointError(f"{path}: array {name!r} is corrupt")
                arrays[name] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist")
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated archive ({exc})") from exc
    return header["meta"], arrays
