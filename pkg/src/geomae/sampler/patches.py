"""Patch-level QA filtering, gap filling, per-area caps and homogeneous-region thinning."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import InvalidArgumentError
from .records import PatchRecord

MAX_MISSING = 0.01
MAX_CLOUD = 0.20
TRAIN_PER_AREA = 10
VAL_PER_AREA = 2


@dataclass(frozen=True)
class QAVerdict:
    accepted: bool
    reason: str | None = None  # "missing" or "cloud" when rejected

    def __bool__(self) -> bool:
        return self.accepted


def filter_patch(candidate: PatchRecord, max_missing: float = MAX_MISSING, max_cloud: float = MAX_CLOUD) -> QAVerdict:
    """Reject when any band of any timestamp is more than 1% missing or any
    timestamp is more than 20% cloudy. Missing data is checked first.
    """
    T = len(candidate.dates)
    if len(candidate.missing_frac) != T or len(candidate.cloud_frac) != T or any(not b for b in candidate.missing_frac):
        raise InvalidArgumentError("QA statistics required for every timestamp and band")
    if any(f > max_missing for bands in candidate.missing_frac for f in bands):
        return QAVerdict(False, "missing")
    if any(c > max_cloud for c in candidate.cloud_frac):
        return QAVerdict(False, "cloud")
    return QAVerdict(True)


def fill_missing_nearest(image: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace missing pixels of a 2D band by their nearest valid neighbour.

    Distance is Chebyshev; among equally near valid pixels the first in
    row-major order wins. ``missing`` is a boolean mask of the same shape.
    """
    img = np.array(image, copy=True)
    missing = np.asarray(missing, dtype=bool)
    if img.shape != missing.shape or img.ndim != 2:
        raise InvalidArgumentError("fill expects a 2D band and a matching mask")
    if missing.all():
        raise InvalidArgumentError("no valid pixel to fill from")
    H, W = img.shape
    valid = ~missing
    for r, c in zip(*np.nonzero(missing)):
        radius = 1
        while True:
            r0, r1 = max(0, r - radius), min(H, r + radius + 1)
            c0, c1 = max(0, c - radius), min(W, c + radius + 1)
            hits = np.argwhere(valid[r0:r1, c0:c1])
            if len(hits):
                rr, cc = hits[0]  # argwhere is row-major
                img[r, c] = image[r0 + rr, c0 + cc]
                break
            radius += 1
    return img


def fill_chip(chip: np.ndarray) -> np.ndarray:
    """Fill NaNs in a ``[..., H, W]`` array band by band."""
    out = np.array(chip, copy=True)
    flat = out.reshape(-1, *out.shape[-2:])
    for k in range(flat.shape[0]):
        miss = np.isnan(flat[k])
        if miss.any():
            flat[k] = fill_missing_nearest(flat[k], miss)
    return out


def cap_and_dedup(
    accepted: Sequence[PatchRecord],
    rng: np.random.Generator,
    train_cap: int = TRAIN_PER_AREA,
    val_cap: int = VAL_PER_AREA,
) -> list[PatchRecord]:
    """At most ``train_cap``/``val_cap`` samples per area, then drop every
    training sample whose area is also a validation area.

    Output keeps the input order of surviving records.
    """
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, rec in enumerate(accepted):
        if rec.split not in ("train", "val"):
            raise InvalidArgumentError(f"record split must be train/val, got {rec.split!r}")
        groups[(rec.split, rec.area_id)].append(i)
    keep: set[int] = set()
    for (split, _), idx in sorted(groups.items()):
        cap = train_cap if split == "train" else val_cap
        if len(idx) > cap:
            idx = sorted(int(idx[j]) for j in rng.choice(len(idx), size=cap, replace=False))
        keep.update(idx)
    val_areas = {area for split, area in groups if split == "val"}
    return [
        rec
        for i, rec in enumerate(accepted)
        if i in keep and not (rec.split == "train" and rec.area_id in val_areas)
    ]


def is_full_sea(rec: PatchRecord, threshold: float = 1.0) -> bool:
    return bool(rec.water_frac) and rec.min_water >= threshold


def subsample_homogeneous(
    records: Sequence[PatchRecord],
    sea_flags: Iterable[bool] | None,
    desert_tile_ids: Iterable[str],
    rate: float = 0.10,
    rng: np.random.Generator | None = None,
) -> list[PatchRecord]:
    """Keep full-sea or desert-tile records with probability ``rate``; keep the rest.

    ``sea_flags`` defaults to :func:`is_full_sea` of each record.
    """
    if not 0.0 < rate <= 1.0:
        raise InvalidArgumentError(f"rate must be in (0, 1], got {rate}")
    rng = rng if rng is not None else np.random.default_rng(0)
    flags = [is_full_sea(r) for r in records] if sea_flags is None else list(sea_flags)
    if len(flags) != len(records):
        raise InvalidArgumentError("one sea flag per record required")
    deserts = set(desert_tile_ids)
    draws = rng.random(len(records))
    out = []
    for rec, sea, u in zip(records, flags, draws):
        if (sea or rec.tile_id in deserts) and u >= rate:
            continue
        out.append(rec)
    return out
