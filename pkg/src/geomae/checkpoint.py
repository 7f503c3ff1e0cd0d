"""Directory checkpoints: a text manifest plus one little-endian blob.

Layout of ``<dir>/manifest.txt`` (UTF-8, tab separated, one record per line)::

    geomae-checkpoint<TAB>1
    meta<TAB><key><TAB><json value>
    tensor<TAB><name><TAB><dtype><TAB><shape, comma separated><TAB><byte offset><TAB><byte length>

``dtype`` is a numpy little-endian code (``<f8``, ``<f4``, ``<i8``, ``|b1``).
Tensors are stored back to back in ``<dir>/tensors.bin`` in manifest order.
Scalars have an empty shape field.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import DataError

MANIFEST = "manifest.txt"
BLOB = "tensors.bin"
MAGIC = "geomae-checkpoint"
VERSION = 1

_TORCH_TO_NP = {
    torch.float64: "<f8",
    torch.float32: "<f4",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC}\t{VERSION}"]
    for key, value in (meta or {}).items():
        lines.append(f"meta\t{key}\t{json.dumps(value, sort_keys=True)}")
    offset = 0
    with open(path / BLOB, "wb") as blob:
        for name, t in tensors.items():
            if "\t" in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} contains a separator")
            t = t.detach().cpu()
            try:
                code = _TORCH_TO_NP[t.dtype]
            except KeyError:
                raise ValueError(f"unsupported dtype {t.dtype} for {name}") from None
            raw = np.ascontiguousarray(t.numpy()).astype(code, copy=False).tobytes()
            shape = ",".join(str(s) for s in t.shape)
            lines.append(f"tensor\t{name}\t{code}\t{shape}\t{offset}\t{len(raw)}")
            blob.write(raw)
            offset += len(raw)
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise DataError(f"checkpoint manifest not found: {manifest}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t")[0] != MAGIC:
        raise DataError(f"{manifest} is not a checkpoint manifest")
    raw = (path / BLOB).read_bytes()
    tensors: dict[str, torch.Tensor] = {}
    meta: dict[str, Any] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if fields[0] == "meta" and len(fields) == 3:
            meta[fields[1]] = json.loads(fields[2])
        elif fields[0] == "tensor" and len(fields) == 6:
            _, name, code, shape, offset, nbytes = fields
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            start, n = int(offset), int(nbytes)
            if start + n > len(raw):
                raise DataError(f"{manifest}:{lineno}: tensor {name} runs past end of blob")
            arr = np.frombuffer(raw[start : start + n], dtype=np.dtype(code)).reshape(dims)
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        elif line.strip():
            raise DataError(f"{manifest}:{lineno}: unrecognised record")
    return tensors, meta
