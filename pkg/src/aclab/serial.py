"""Self-describing binary container for buffers and checkpoints.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, raw little-endian C-order array payload. The header carries
arbitrary metadata plus an ``arrays`` table (name, dtype, shape, offset).
Writing is fully deterministic: identical contents produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"ACLABBIN"
FORMAT_VERSION = 1

# dtypes are pinned to explicit little-endian codes so files are portable.
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<u1"}


class ContainerError(Exception):
    """Raised for corrupt, truncated, or version-mismatched container files."""


def _canonical_dtype(arr: np.ndarray) -> str:
    code = arr.dtype.newbyteorder("<").str
    if code not in _ALLOWED_DTYPES:
        raise ContainerError(f"unsupported array dtype {arr.dtype}")
    return code


def save_container(path: str | os.PathLike, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``meta`` and named arrays to ``path`` atomically.

    ``meta`` must be JSON-serializable and must not contain the reserved
    keys ``arrays`` or ``format_version``.
    """
    for key in ("arrays", "format_version"):
        if key in meta:
            raise ValueError(f"meta key {key!r} is reserved")
    table = []
    offset = 0
    blobs = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        code = _canonical_dtype(arr)
        blob = arr.astype(code, copy=False).tobytes()
        table.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = table
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".aclab")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`save_container`.

    Returns (meta, arrays) where meta excludes the internal arrays table.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a container file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise ContainerError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt header: {exc}") from exc
        payload = fh.read()

    table = header.pop("arrays", [])
    header.pop("format_version", None)
    arrays: dict[str, np.ndarray] = {}
    for entry in table:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        blob = payload[start : start + nbytes]
        if len(blob) != nbytes:
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return header, arrays
