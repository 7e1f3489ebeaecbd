"""Self-describing binary container: JSON header followed by a float64 payload.

Layout::

    bytes 0..7     magic b"SMUGPK01"
    bytes 8..15    little-endian uint64 header length n
    bytes 16..16+n UTF-8 JSON header (sorted keys)
    remainder      little-endian float64 payload

The header always records ``payload_bytes`` so truncation is detectable
without parsing the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMUGPK01"
_PREFIX = len(MAGIC) + 8


class ContainerError(ValueError):
    pass


def write_container(path, header: dict, payload: np.ndarray) -> None:
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    header = dict(header, payload_bytes=len(data))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data)


def _read_prefix(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, not a container file")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise ContainerError(f"{path}: truncated before header length")
    (n,) = struct.unpack("<Q", raw_len)
    blob = fh.read(n)
    if len(blob) != n:
        raise ContainerError(f"{path}: header declares {n} bytes but only {len(blob)} are present")
    try:
        header = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or "payload_bytes" not in header:
        raise ContainerError(f"{path}: header lacks payload_bytes")
    header["_payload_offset"] = _PREFIX + n
    return header


def read_header(path) -> dict:
    """Parse only the header; the payload is never read."""
    with open(path, "rb") as fh:
        return _read_prefix(fh, path)


def read_container(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_prefix(fh, path)
        data = fh.read()
    expected = int(header["payload_bytes"])
    if len(data) != expected:
        raise ContainerError(f"{path}: payload length mismatch, expected {expected} bytes, found {len(data)}")
    if expected % 8:
        raise ContainerError(f"{path}: payload of {expected} bytes is not a whole number of float64 values")
    return header, np.frombuffer(data, dtype="<f8").astype(np.float64)
