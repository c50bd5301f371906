"""Binary container shared by checkpoints and episode corpora.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic, ASCII (b"METACKPT" or b"METACORP")
    8       4     format version, uint32 (currently 1)
    12      8     header length H in bytes, uint64
    20      H     header, UTF-8 JSON object
    20+H    ...   data region: float64 little-endian arrays, C order

Array records inside the header are objects ``{"shape": [...], "offset": n}``
where ``offset`` counts bytes from the start of the data region.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class FormatError(ValueError):
    """A container file is malformed."""


class ArrayWriter:
    """Accumulates arrays for the data region and hands out records."""

    def __init__(self):
        self._chunks: List[bytes] = []
        self._size = 0

    def add(self, array) -> dict:
        a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        record = {"shape": list(a.shape), "offset": self._size}
        raw = a.tobytes()
        self._chunks.append(raw)
        self._size += len(raw)
        return record

    def payload(self) -> bytes:
        return b"".join(self._chunks)


def write_container(path: Union[str, Path], magic: bytes, header: dict, writer: ArrayWriter) -> None:
    body = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, VERSION, len(body)))
        fh.write(body)
        fh.write(writer.payload())


def read_container(path: Union[str, Path], magic: bytes) -> Tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for a container prefix")
    got_magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    end = _PREFIX.size + hlen
    if end > len(raw):
        raise FormatError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    return header, memoryview(raw)[end:]


def read_array(data: memoryview, record, where: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in record["shape"])
        offset = int(record["offset"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{where}: array record needs integer 'shape' and 'offset'") from None
    if any(s < 0 for s in shape) or offset < 0:
        raise FormatError(f"{where}: negative shape or offset")
    count = int(np.prod(shape)) if shape else 1
    if offset + 8 * count > len(data):
        raise FormatError(f"{where}: array extends past end of data region")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
