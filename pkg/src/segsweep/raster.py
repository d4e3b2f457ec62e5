"""Binary raster container for probability maps and reference masks.

Layout::

    b"SGSW" | version (u8 = 1) | header length (u32 LE) | header JSON (utf-8)
    | section 0 pixels | section 1 pixels | ...

The header is ``{"scan_id": str, "dtype": "f32" | "u8",
"sections": [{"index": int, "rows": int, "cols": int}, ...]}``.
Pixels are little-endian, row-major, in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SGSW"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

_PREFIX = struct.Struct("<4sBI")


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RasterSection:
    index: int
    rows: int
    cols: int


@dataclass(frozen=True)
class RasterHeader:
    scan_id: str
    dtype: str
    sections: tuple[RasterSection, ...]
    data_offset: int

    def section(self, index: int) -> RasterSection:
        for s in self.sections:
            if s.index == index:
                return s
        raise KeyError(index)


def _parse_header(raw: bytes, path: Path) -> tuple[str, str, tuple[RasterSection, ...]]:
    try:
        doc = json.loads(raw.decode("utf-8"))
        scan_id = str(doc["scan_id"])
        dtype = doc["dtype"]
        sections = tuple(
            RasterSection(int(s["index"]), int(s["rows"]), int(s["cols"]))
            for s in doc["sections"]
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise RasterFormatError(f"{path}: malformed raster header ({exc})") from exc
    if dtype not in DTYPES:
        raise RasterFormatError(f"{path}: unsupported dtype {dtype!r}")
    return scan_id, dtype, sections


def read_header(path: str | Path) -> RasterHeader:
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise RasterFormatError(f"{path}: truncated raster prefix")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise RasterFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise RasterFormatError(f"{path}: unsupported raster version {version}")
        raw = fh.read(hlen)
        if len(raw) < hlen:
            raise RasterFormatError(f"{path}: truncated raster header")
    scan_id, dtype, sections = _parse_header(raw, path)
    header = RasterHeader(scan_id, dtype, sections, _PREFIX.size + hlen)
    expected = header.data_offset + sum(
        s.rows * s.cols for s in sections
    ) * DTYPES[dtype].itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise RasterFormatError(
            f"{path}: expected {expected} bytes from header, found {actual}"
        )
    return header


def read_raster(path: str | Path) -> tuple[RasterHeader, dict[int, np.ndarray]]:
    """Read every section; arrays are returned read-only in native dtype."""
    header = read_header(path)
    dt = DTYPES[header.dtype]
    grids: dict[int, np.ndarray] = {}
    with open(path, "rb") as fh:
        fh.seek(header.data_offset)
        for s in header.sections:
            arr = np.fromfile(fh, dtype=dt, count=s.rows * s.cols)
            arr = arr.reshape(s.rows, s.cols).astype(dt.newbyteorder("="), copy=False)
            arr.flags.writeable = False
            grids[s.index] = arr
    return header, grids


def write_raster(
    path: str | Path, scan_id: str, dtype: str, grids: Mapping[int, np.ndarray]
) -> None:
    """Write ``grids`` (ordered by insertion) to ``path``."""
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = DTYPES[dtype]
    header = {
        "scan_id": scan_id,
        "dtype": dtype,
        "sections": [
            {"index": int(i), "rows": int(g.shape[0]), "cols": int(g.shape[1])}
            for i, g in grids.items()
        ],
    }
    raw = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for g in grids.values():
            if g.ndim != 2:
                raise ValueError("raster sections must be 2-D")
            fh.write(np.ascontiguousarray(g, dtype=dt).tobytes())
