"""HQTM container: magic + version + JSON header + tensor payload + CRC32.

Layout (all integers little-endian):

    bytes 0..3    magic b"HQTM"
    u32           container version (currently 1)
    u32           header byte length
    header        canonical JSON (sorted keys, compact separators), declares
                  "format" ("HQTM" for full-precision models, "HQTM-Q" for
                  hybrids), model dims and a tensor directory with
                  name/shape/dtype/offset/nbytes relative to payload start
    payload       concatenated tensor bytes; dtype "f32" entries are
                  little-endian float32 row-major, "u8" entries are raw bytes
                  (bit-packed codes)
    u32           CRC32 of the payload bytes

The same layout is written by the companion trainer; docs/file_formats.md is
the normative description.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import BadMagic, ChecksumMismatch, HeaderMismatch, TruncatedFile

MAGIC = b"HQTM"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class TensorWriter:
    """Accumulates named tensors and emits the directory + payload."""

    def __init__(self):
        self._entries = []
        self._chunks = []
        self._offset = 0

    def add_f32(self, name: str, arr: np.ndarray):
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        self.add_raw(name, arr32.tobytes(), list(arr32.shape), "f32")

    def add_raw(self, name: str, data: bytes, shape: list, dtype: str):
        self._entries.append({
            "name": name, "shape": shape, "dtype": dtype,
            "offset": self._offset, "nbytes": len(data),
        })
        self._chunks.append(data)
        self._offset += len(data)

    @property
    def directory(self) -> list:
        return self._entries

    @property
    def payload(self) -> bytes:
        return b"".join(self._chunks)


def write_container(path, header: dict, writer: TensorWriter):
    """Write a container file; header gains the tensor directory."""
    full_header = dict(header)
    full_header["tensors"] = writer.directory
    header_bytes = canonical_json(full_header).encode("utf-8")
    payload = writer.payload
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


class ContainerReader:
    """Parsed container: header dict plus named tensor access."""

    def __init__(self, header: dict, payload: bytes):
        self.header = header
        self.payload = payload
        self._index = {t["name"]: t for t in header.get("tensors", [])}

    def names(self):
        return list(self._index)

    def has(self, name: str) -> bool:
        return name in self._index

    def raw(self, name: str) -> bytes:
        t = self._entry(name)
        return self.payload[t["offset"]:t["offset"] + t["nbytes"]]

    def f32(self, name: str) -> np.ndarray:
        """Tensor widened to float64 (storage is float32)."""
        t = self._entry(name)
        if t["dtype"] != "f32":
            raise HeaderMismatch(f"tensor {name!r} has dtype {t['dtype']}, expected f32")
        arr = np.frombuffer(self.raw(name), dtype="<f4").astype(np.float64)
        return arr.reshape(t["shape"])

    def shape(self, name: str) -> list:
        return list(self._entry(name)["shape"])

    def _entry(self, name: str) -> dict:
        if name not in self._index:
            raise HeaderMismatch(f"tensor {name!r} missing from container")
        return self._index[name]


def read_container(path, expected_format: str) -> ContainerReader:
    """Parse and fully validate a container file."""
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < 12:
        raise TruncatedFile(f"{path}: {len(data)} bytes is too short for a header")
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise HeaderMismatch(f"{path}: unsupported container version {version}")
    if len(data) < 12 + header_len:
        raise TruncatedFile(f"{path}: header declared {header_len} bytes, file too short")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderMismatch(f"{path}: unparseable header: {e}") from e

    fmt = header.get("format")
    if fmt != expected_format:
        raise HeaderMismatch(f"{path}: format {fmt!r}, expected {expected_format!r}")

    tensors = header.get("tensors", [])
    payload_len = max((t["offset"] + t["nbytes"] for t in tensors), default=0)
    body_start = 12 + header_len
    if len(data) < body_start + payload_len + 4:
        raise TruncatedFile(f"{path}: payload or CRC trailer missing")
    payload = data[body_start:body_start + payload_len]
    (stored_crc,) = struct.unpack("<I", data[body_start + payload_len:body_start + payload_len + 4])
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatch(f"{path}: CRC32 {actual_crc:#010x} != stored {stored_crc:#010x}")
    return ContainerReader(header, payload)
