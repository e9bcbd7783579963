"""Point-cloud file formats and decimal-stable JSON helpers.

Binary clouds ("PFPC") carry a fixed little-endian header (magic, version,
N, C, precision) followed by row-major coordinates then features. The text
alternative is CSV rows ``x,y,z[,f1..fC]``. Binary round-trips are
bit-exact; CSV is written with 9 significant digits, which round-trips
float32 exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Tuple

import numpy as np

MAGIC = b"PFPC"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, N, C, precision


class CloudFileError(ValueError):
    """Malformed cloud file; the message names the file and position."""


def _dtype_for(precision: int):
    if precision == 32:
        return np.dtype("<f4")
    if precision == 64:
        return np.dtype("<f8")
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def write_cloud(path, coords: np.ndarray, feats: np.ndarray, precision: int = 32) -> None:
    """Write a binary cloud file."""
    coords = np.asarray(coords)
    feats = np.asarray(feats)
    n = coords.shape[0]
    c = feats.shape[1] if feats.ndim == 2 else 0
    dt = _dtype_for(precision)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, precision))
        fh.write(np.ascontiguousarray(coords, dtype=dt).tobytes())
        if c:
            fh.write(np.ascontiguousarray(feats, dtype=dt).tobytes())


def write_cloud_csv(path, coords: np.ndarray, feats: np.ndarray) -> None:
    """Write CSV rows x,y,z[,f1..fC] at 9 significant digits."""
    coords = np.asarray(coords)
    feats = np.asarray(feats)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(coords.shape[0]):
            row = list(coords[i]) + (list(feats[i]) if feats.size else [])
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_cloud(path) -> Tuple[np.ndarray, np.ndarray, int]:
    """Read a cloud file, auto-detecting binary vs CSV by the magic bytes.

    Returns:
        (coords [N,3], feats [N,C], precision) in the file's native dtype;
        CSV data is reported as precision 32.

    Raises:
        CloudFileError: malformed content, naming the file and the byte
            offset (binary) or line number (CSV).
        FileNotFoundError: missing file.
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == MAGIC:
            return _read_binary(path, fh)
    return _read_csv(path)


def _read_binary(path, fh):
    rest = fh.read(_HEADER.size - 4)
    if len(rest) != _HEADER.size - 4:
        raise CloudFileError(f"{path}: truncated header at byte {4 + len(rest)}")
    _, version, n, c, precision = _HEADER.unpack(MAGIC + rest)
    if version != VERSION:
        raise CloudFileError(f"{path}: unsupported version {version} at byte 4")
    try:
        dt = _dtype_for(precision)
    except ValueError:
        raise CloudFileError(f"{path}: bad precision flag {precision} at byte 16") from None
    payload = fh.read()
    expected = n * (3 + c) * dt.itemsize
    if len(payload) != expected:
        raise CloudFileError(
            f"{path}: payload is {len(payload)} bytes at byte {_HEADER.size}, "
            f"expected {expected} for N={n}, C={c}, precision={precision}"
        )
    flat = np.frombuffer(payload, dtype=dt)
    coords = flat[: n * 3].reshape(n, 3).copy()
    feats = flat[n * 3 :].reshape(n, c).copy()
    return coords, feats, precision


def _read_csv(path):
    coords_rows = []
    feat_rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise CloudFileError(f"{path}: line {lineno}: need at least x,y,z")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise CloudFileError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(parts)}"
                )
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise CloudFileError(f"{path}: line {lineno}: {exc}") from None
            coords_rows.append(values[:3])
            feat_rows.append(values[3:])
    if not coords_rows:
        raise CloudFileError(f"{path}: line 1: no data rows")
    coords = np.asarray(coords_rows, dtype=np.float32)
    feats = np.asarray(feat_rows, dtype=np.float32).reshape(len(coords_rows), -1)
    return coords, feats, 32


def payload_checksum(coords: np.ndarray, feats: np.ndarray, precision: int = 32) -> str:
    """SHA-256 of the canonical little-endian payload bytes."""
    dt = _dtype_for(precision)
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(coords, dtype=dt).tobytes())
    h.update(np.ascontiguousarray(feats, dtype=dt).tobytes())
    return h.hexdigest()


def round9(x: float) -> float:
    """Round to 9 significant decimal digits (stable cross-run serialization)."""
    return float(f"{float(x):.9g}")


def json_ready(obj):
    """Recursively round floats to 9 significant digits for JSON dumps."""
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    if isinstance(obj, (float, np.floating)):
        return round9(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [json_ready(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj)!r}")


def dump_json(obj, fh=None, indent: int = 2) -> str:
    text = json.dumps(json_ready(obj), indent=indent, sort_keys=False)
    if fh is not None:
        fh.write(text + "\n")
    return text
