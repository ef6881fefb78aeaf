"""Byte-stable container for named arrays with a JSON header.

Used for model checkpoints and voxel archives. Unlike zip-based formats the
file bytes depend only on the payload, so identical runs produce identical
artifacts. Layout: one magic line, the header length in bytes, the JSON
header (format tag, version, array table, user metadata), then the raw
little-endian array bytes back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatchError, MissingArtifactError, ValidationError

MAGIC = b"EVDIFF-ARRAYS 1\n"
FORMAT_VERSION = 1


def save_arrays(path: str | Path, tag: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays under a format tag; keys are stored sorted."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "tag": tag,
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_arrays(path: str | Path, expect_tag: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays, meta).

    Raises :class:`CheckpointMismatchError` when `expect_tag` disagrees with
    the stored tag.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"array container not found: {path}")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValidationError(f"{path} is not an evdiff array container")
        length = int(f.readline().strip())
        header = json.loads(f.read(length).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported container version {header.get('format_version')}")
        if expect_tag is not None and header["tag"] != expect_tag:
            raise CheckpointMismatchError(f"{path} holds {header['tag']!r}, expected {expect_tag!r}")
        payload = f.read()
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
