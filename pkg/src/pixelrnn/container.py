"""Self-describing binary container for checkpoints and emitted features.

Layout (all integers little-endian)::

    magic      4 bytes   b"PXCK"
    version    u16
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    n_records  u32
    record*    n_records times:
        name_len u16, name (UTF-8)
        kind     u8    0 = real array, 1 = binary array with shadow
        dtype    u8    code from DTYPES
        ndim     u8
        dims     ndim x u32
        kind 0:  payload, prod(dims) values of dtype
        kind 1:  n_packed u32, packed bits (np.packbits, little bit order,
                 bit 1 = +1 or 1, bit 0 = -1 or 0), then the shadow payload
                 (prod(dims) values of dtype)

Binary records carry both the deployed bits and the continuous shadow value
they were quantized from.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PXCK"
VERSION = 1
DTYPES = {0: np.float32, 1: np.float64, 2: np.int8, 3: np.uint8, 4: np.int32, 5: np.int64}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


class ContainerError(ValueError):
    pass


@dataclass
class Record:
    """One named array.  `shadow` set means a binary record: `value` holds the bits."""

    name: str
    value: np.ndarray
    shadow: np.ndarray | None = None

    @property
    def binary(self) -> bool:
        return self.shadow is not None


def _dtype_code(arr: np.ndarray) -> int:
    try:
        return _CODES[arr.dtype]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


def _to_le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def to_bytes(header: dict, records: list[Record]) -> bytes:
    out = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, len(hdr)))
    out.write(hdr)
    out.write(struct.pack("<I", len(records)))
    for rec in records:
        name = rec.name.encode()
        payload = rec.shadow if rec.binary else rec.value
        payload = np.asarray(payload)
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<BBB", int(rec.binary), _dtype_code(payload), payload.ndim))
        out.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
        if rec.binary:
            value = np.asarray(rec.value)
            if value.shape != payload.shape:
                raise ContainerError(f"{rec.name}: bits and shadow differ in shape")
            if not np.all(np.isin(value, (-1, 0, 1))):
                raise ContainerError(f"{rec.name}: binary record holds non-binary values")
            packed = np.packbits((value.ravel() > 0).astype(np.uint8), bitorder="little")
            out.write(struct.pack("<I", packed.size))
            out.write(packed.tobytes())
        out.write(_to_le(payload))
    return out.getvalue()


def from_bytes(blob: bytes, signed_bits: bool = True) -> tuple[dict, dict[str, Record]]:
    """Parse a container; binary bits decode to +-1 (or 0/1 with signed_bits=False)."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("not a container (bad magic)")
    version, hdr_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(bytes(take(hdr_len)).decode())
    (n_records,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        kind, code, ndim = struct.unpack("<BBB", take(3))
        if code not in DTYPES:
            raise ContainerError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = np.dtype(DTYPES[code]).newbyteorder("<")
        count = int(np.prod(dims, dtype=np.int64))
        bits = None
        if kind == 1:
            (n_packed,) = struct.unpack("<I", take(4))
            packed = np.frombuffer(take(n_packed), dtype=np.uint8)
            bits = np.unpackbits(packed, count=count, bitorder="little").reshape(dims).astype(np.int8)
            if signed_bits:
                bits = 2 * bits - 1
        elif kind != 0:
            raise ContainerError(f"{name}: unknown record kind {kind}")
        payload = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        payload = payload.astype(dtype.newbyteorder("="))
        records[name] = Record(name, bits, payload) if kind == 1 else Record(name, payload)
    if pos != len(view):
        raise ContainerError("trailing bytes after last record")
    return header, records


def write(path, header: dict, records: list[Record]) -> None:
    Path(path).write_bytes(to_bytes(header, records))


def read(path, signed_bits: bool = True) -> tuple[dict, dict[str, Record]]:
    return from_bytes(Path(path).read_bytes(), signed_bits)


def write_features(path, features: np.ndarray, labels: np.ndarray, meta: dict | None = None) -> None:
    """Emitted features (N, E, h, w) and their labels, for decoder fine-tuning."""
    header = {"format": "features", **(meta or {})}
    write(path, header, [
        Record("features", np.asarray(features, dtype=np.float64)),
        Record("labels", np.asarray(labels, dtype=np.int64)),
    ])


def read_features(path) -> tuple[np.ndarray, np.ndarray, dict]:
    header, recs = read(path)
    if header.get("format") != "features":
        raise ContainerError(f"{path} does not hold features")
    return recs["features"].value, recs["labels"].value, header
