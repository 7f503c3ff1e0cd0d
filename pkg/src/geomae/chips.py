"""Chip files, chip manifests and an in-memory chip dataset.

Chip file layout (all integers little-endian)::

    offset 0   4 bytes   magic b"GCHP"
    offset 4   uint8     format version (1)
    offset 5   uint8     dtype code: 1 = float32, 2 = float64
    offset 6   uint8     ndim
    offset 7   uint8     reserved (0)
    offset 8   ndim x uint32   dims, outermost first
    then       prod(dims) values, C order, little-endian

A chip manifest is a UTF-8 CSV with a header row. Required column:
``chip_path`` (relative to the manifest directory, or absolute). Optional
columns: ``lat``, ``lon``, ``dates`` (``YYYY-DDD`` joined by ``;``),
``split``, ``label``, ``label_path``, ``target``, ``aux_path``, ``year``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .posenc import GeoTemporalMetadata

MAGIC = b"GCHP"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_chip(path, array: np.ndarray, dtype="float32") -> None:
    arr = np.asarray(array, dtype=dtype)
    code = _CODE_OF[arr.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).astype(_CODES[code], copy=False).tobytes())


def read_chip(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"chip file not found: {path}") from None
    if raw[:4] != MAGIC or len(raw) < 8:
        raise DataError(f"{path}: not a chip file")
    version, code, ndim, _ = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION or code not in _CODES:
        raise DataError(f"{path}: unsupported chip version/dtype ({version}, {code})")
    dims = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    dt = _CODES[code]
    payload = raw[8 + 4 * ndim :]
    if len(payload) != int(np.prod(dims, dtype=np.int64)) * dt.itemsize:
        raise DataError(f"{path}: payload size does not match header dims {dims}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def format_dates(dates: Iterable[tuple[int, int]]) -> str:
    return ";".join(f"{y:04d}-{d:03d}" for y, d in dates)


def parse_dates(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in text.split(";"):
        year, doy = part.strip().split("-")
        out.append((int(year), int(doy)))
    return tuple(out)


def read_manifest(path, required: Sequence[str] = ("chip_path",)) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: manifest lacks columns {missing}")
        return list(reader)


def write_manifest(path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


@dataclass
class ChipDataset:
    """Chips listed in a manifest, loaded lazily and cached as float32."""

    manifest: Path
    split: str | None = None
    rows: list[dict[str, str]] = field(init=False)
    _cache: dict[int, np.ndarray] = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        rows = read_manifest(self.manifest)
        if self.split is not None and rows and "split" in rows[0]:
            rows = [r for r in rows if r.get("split") == self.split]
        self.rows = rows

    def __len__(self) -> int:
        return len(self.rows)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.manifest.parent / p

    def chip(self, index: int) -> np.ndarray:
        if index not in self._cache:
            row = self.rows[index]
            arr = read_chip(self.resolve(row["chip_path"]))
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4 or not np.isfinite(arr).all():
                raise DataError(f"chip {row['chip_path']}: expected finite [T, C, H, W]")
            self._cache[index] = arr
        return self._cache[index]

    def meta(self, index: int) -> GeoTemporalMetadata | None:
        row = self.rows[index]
        if not row.get("dates") or row.get("lat") in (None, "") or row.get("lon") in (None, ""):
            return None
        return GeoTemporalMetadata(float(row["lat"]), float(row["lon"]), parse_dates(row["dates"]))

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and (population) std over every pixel of every chip."""
        total = sq = None
        count = 0
        for i in range(len(self)):
            x = self.chip(i).astype(np.float64)
            s = x.sum(axis=(0, 2, 3))
            q = (x * x).sum(axis=(0, 2, 3))
            total = s if total is None else total + s
            sq = q if sq is None else sq + q
            count += x.shape[0] * x.shape[2] * x.shape[3]
        if not count:
            raise DataError("cannot compute channel statistics of an empty dataset")
        mean = total / count
        std = np.sqrt(np.maximum(sq / count - mean**2, 0.0))
        return mean, np.where(std > 0, std, 1.0)
