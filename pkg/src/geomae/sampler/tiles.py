"""Tile selection: per-class pools, urban and entropy top-ups, ecoregion coverage, split."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import InvalidArgumentError
from .records import TileRecord


@dataclass
class TileSelectionConfig:
    per_class: int = 100
    pool_size: int = 500
    n_urban: int = 1000
    n_entropy: int = 1000
    min_ecoregion_tiles: int = 3
    train_fraction: float = 0.95


@dataclass
class TileSelection:
    train: list[str]
    val: list[str]
    sources: dict[str, set[str]] = field(default_factory=dict)  # tile -> {"class:x", "urban", ...}

    @property
    def all(self) -> list[str]:
        return self.train + self.val


def merge_classes(props: Mapping[str, float], groups: Mapping[str, Sequence[str]]) -> dict[str, float]:
    """Sum class fractions into merged classes, e.g. the many forest types into two."""
    merged: dict[str, float] = {}
    member_of = {m: g for g, members in groups.items() for m in members}
    for name, value in props.items():
        key = member_of.get(name, name)
        merged[key] = merged.get(key, 0.0) + value
    return merged


def _top(tiles: Sequence[TileRecord], key, n: int) -> list[TileRecord]:
    scored = [(key(t), t.tile_id, t) for t in tiles]
    scored = [s for s in scored if s[0] > 0]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [s[2] for s in scored[:n]]


def class_pool(catalog: Sequence[TileRecord], cls: str, pool_size: int) -> list[TileRecord]:
    """Tiles with the highest (nonzero) proportion of ``cls``; ties by tile id."""
    return _top(catalog, lambda t: t.class_props.get(cls, 0.0), pool_size)


def select_tiles(
    catalog: Sequence[TileRecord], rng: np.random.Generator, cfg: TileSelectionConfig | None = None
) -> TileSelection:
    """Union of the per-class draws, urban and entropy top lists and the
    ecoregion top-up, deduplicated and split at tile level.

    The same tile may be drawn for several classes; it is kept once.
    """
    cfg = cfg or TileSelectionConfig()
    if not catalog:
        raise InvalidArgumentError("tile catalog is empty")
    by_id = {t.tile_id: t for t in catalog}
    if len(by_id) != len(catalog):
        raise InvalidArgumentError("duplicate tile ids in catalog")
    sources: dict[str, set[str]] = {}

    def add(tile_id: str, why: str) -> None:
        sources.setdefault(tile_id, set()).add(why)

    classes = sorted({c for t in catalog for c in t.class_props})
    for cls in classes:
        pool = class_pool(catalog, cls, cfg.pool_size)
        k = min(cfg.per_class, len(pool))
        for i in rng.choice(len(pool), size=k, replace=False):
            add(pool[int(i)].tile_id, f"class:{cls}")
    for t in _top(catalog, lambda t: t.urban_frac, cfg.n_urban):
        add(t.tile_id, "urban")
    # zero-entropy tiles are homogeneous and never count as "high entropy"
    for t in _top(catalog, lambda t: t.entropy, cfg.n_entropy):
        add(t.tile_id, "entropy")

    # ecoregion top-up: greedily add the tile touching the most under-covered ecoregions
    available = Counter(e for t in catalog for e in t.ecoregions)
    target = {e: min(cfg.min_ecoregion_tiles, n) for e, n in available.items()}
    have = Counter(e for tid in sources for e in by_id[tid].ecoregions)
    for eco in sorted(target):
        while have[eco] < target[eco]:
            short = {e for e in target if have[e] < target[e]}
            candidates = [t for t in catalog if eco in t.ecoregions and t.tile_id not in sources]
            best = min(candidates, key=lambda t: (-len(t.ecoregions & short), t.tile_id))
            add(best.tile_id, "ecoregion")
            have.update(best.ecoregions)

    selected = sorted(sources)
    order = [selected[int(i)] for i in rng.permutation(len(selected))]
    n_train = int(round(cfg.train_fraction * len(order)))
    return TileSelection(train=sorted(order[:n_train]), val=sorted(order[n_train:]), sources=sources)
