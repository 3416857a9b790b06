"""Binary container for named float64 arrays.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header
listing format version, entry names/shapes and free-form metadata, then the
raw little-endian float64 payloads concatenated in header order.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import DatasetFormatError

FORMAT_VERSION = 1


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays atomically (temp file + rename) in dict order."""
    header = {
        "format_version": FORMAT_VERSION,
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(np.uint64(len(blob)).tobytes())
            f.write(blob)
            for v in arrays.values():
                f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; raises DatasetFormatError on any corruption."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: too short to hold a header length")
    hlen = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if len(raw) < 8 + hlen:
        raise DatasetFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 8 + hlen
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise DatasetFormatError(f"{path}: truncated payload for entry {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return arrays, header.get("meta", {})
