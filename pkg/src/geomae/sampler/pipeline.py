"""End-to-end dataset sampling and the constraint verifier."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..seeding import numpy_rng
from .patches import MAX_CLOUD, MAX_MISSING, TRAIN_PER_AREA, VAL_PER_AREA, is_full_sea, subsample_homogeneous
from .records import FIRST_YEAR, LAST_YEAR, PatchRecord, SceneQA, TileRecord, gaps_valid
from .sequences import TRAIN_CAP, VAL_CAP, build_sequences
from .tiles import TileSelection, TileSelectionConfig, select_tiles


@dataclass
class SamplerConfig:
    tiles: TileSelectionConfig = field(default_factory=TileSelectionConfig)
    train_sequence_cap: int = TRAIN_CAP
    val_sequence_cap: int = VAL_CAP
    max_missing: float = MAX_MISSING
    max_cloud: float = MAX_CLOUD
    train_per_area: int = TRAIN_PER_AREA
    val_per_area: int = VAL_PER_AREA
    homogeneous_rate: float = 0.10
    desert_class: str = "bare"
    desert_threshold: float = 0.8
    sea_threshold: float = 1.0


@dataclass
class SamplingResult:
    selection: TileSelection
    records: list[PatchRecord]
    sequences_per_tile: dict[str, int]
    stats: Counter


def desert_tiles(catalog: Sequence[TileRecord], cls: str = "bare", threshold: float = 0.8) -> set[str]:
    return {t.tile_id for t in catalog if t.class_props.get(cls, 0.0) >= threshold}


def _tile_arrays(scenes: Sequence[SceneQA]):
    """Stack per-scene QA over the union of blocks; absent blocks count as unusable."""
    blocks = sorted({b for s in scenes for b in s.blocks})
    pos = {b: k for k, b in enumerate(blocks)}
    n_bands = max((s.missing.shape[1] for s in scenes), default=0)
    S, nb = len(scenes), len(blocks)
    cloud = np.ones((S, nb))
    water = np.zeros((S, nb))
    missing = np.ones((S, nb, n_bands))
    areas: dict[tuple[int, int], str] = {}
    for i, s in enumerate(scenes):
        for j, b in enumerate(s.blocks):
            k = pos[b]
            cloud[i, k] = s.cloud[j]
            water[i, k] = s.water[j]
            missing[i, k] = s.missing[j]
            areas.setdefault(b, s.areas[j])
    return blocks, [areas[b] for b in blocks], cloud, water, missing


def _tile_candidates(
    tile: TileRecord, split: str, scenes: Sequence[SceneQA], cfg: SamplerConfig, seed: int, stats: Counter
) -> tuple[int, list[tuple[float, PatchRecord]]]:
    """Sequences, QA filter and a per-tile pre-cap by random priority."""
    cap = cfg.train_sequence_cap if split == "train" else cfg.val_sequence_cap
    scenes = sorted(scenes, key=lambda s: s.date)
    dates = [s.date for s in scenes]
    seqs = build_sequences(dates, numpy_rng(seed, f"sampler/sequences/{tile.tile_id}"), cap)
    if len(seqs) == 0:
        return 0, []
    blocks, areas, cloud, water, missing = _tile_arrays(scenes)
    c = cloud[seqs]  # [n, 4, nb]
    m = missing[seqs]  # [n, 4, nb, bands]
    bad_missing = (m > cfg.max_missing).any(axis=(1, 3))
    bad_cloud = (c > cfg.max_cloud).any(axis=1)
    ok = ~bad_missing & ~bad_cloud
    stats["candidates"] += ok.size
    stats["rejected_missing"] += int(bad_missing.sum())
    stats["rejected_cloud"] += int((bad_cloud & ~bad_missing).sum())
    per_area_cap = cfg.train_per_area if split == "train" else cfg.val_per_area
    prio = numpy_rng(seed, f"sampler/priority/{tile.tile_id}").random(ok.shape)
    out = []
    for k, block in enumerate(blocks):
        rows = np.nonzero(ok[:, k])[0]
        if len(rows) > per_area_cap:
            rows = rows[np.argsort(prio[rows, k], kind="stable")[:per_area_cap]]
        for r in rows:
            seq = seqs[r]
            rec = PatchRecord(
                tile_id=tile.tile_id,
                area_id=areas[k],
                block=block,
                dates=tuple(dates[i] for i in seq),
                missing_frac=tuple(tuple(float(v) for v in missing[i, k]) for i in seq),
                cloud_frac=tuple(float(cloud[i, k]) for i in seq),
                water_frac=tuple(float(water[i, k]) for i in seq),
                split=split,
                lat=tile.lat,
                lon=tile.lon,
            )
            out.append((float(prio[r, k]), rec))
    return len(seqs), out


def _cap_by_priority(items: list[tuple[float, PatchRecord]], cfg: SamplerConfig, stats: Counter) -> list[PatchRecord]:
    """Keep the lowest-priority ``cap`` records per (split, area): a uniform random
    subset, since priorities are i.i.d. uniform. Then drop train records in val areas.
    """
    groups: dict[tuple[str, str], list[tuple[float, PatchRecord]]] = defaultdict(list)
    for prio, rec in items:
        groups[(rec.split, rec.area_id)].append((prio, rec))
    kept = []
    for (split, _), members in groups.items():
        cap = cfg.train_per_area if split == "train" else cfg.val_per_area
        members.sort(key=lambda x: x[0])
        stats["capped"] += max(0, len(members) - cap)
        kept.extend(rec for _, rec in members[:cap])
    val_areas = {area for split, area in groups if split == "val"}
    out = [r for r in kept if not (r.split == "train" and r.area_id in val_areas)]
    stats["overlap_dropped"] += len(kept) - len(out)
    return out


def record_sort_key(rec: PatchRecord):
    return (rec.split, rec.tile_id, rec.block, rec.dates)


def run_sampler(
    catalog: Sequence[TileRecord],
    scenes_by_tile: Mapping[str, Sequence[SceneQA]],
    seed: int = 0,
    cfg: SamplerConfig | None = None,
) -> SamplingResult:
    """Tile selection -> sequences -> QA filter -> per-area caps and overlap
    removal -> sea/desert thinning. Deterministic given ``seed``.
    """
    cfg = cfg or SamplerConfig()
    stats: Counter = Counter()
    selection = select_tiles(catalog, numpy_rng(seed, "sampler/tiles"), cfg.tiles)
    by_id = {t.tile_id: t for t in catalog}
    split_of = {t: "train" for t in selection.train} | {t: "val" for t in selection.val}
    items: list[tuple[float, PatchRecord]] = []
    seq_counts: dict[str, int] = {}
    for tile_id in sorted(split_of):
        n, cands = _tile_candidates(
            by_id[tile_id], split_of[tile_id], scenes_by_tile.get(tile_id, ()), cfg, seed, stats
        )
        seq_counts[tile_id] = n
        items.extend(cands)
    records = _cap_by_priority(items, cfg, stats)
    records.sort(key=record_sort_key)
    deserts = desert_tiles(catalog, cfg.desert_class, cfg.desert_threshold)
    sea = [is_full_sea(r, cfg.sea_threshold) for r in records]
    before = len(records)
    records = subsample_homogeneous(
        records, sea, deserts, cfg.homogeneous_rate, numpy_rng(seed, "sampler/homogeneous")
    )
    stats["homogeneous_dropped"] += before - len(records)
    stats["records"] = len(records)
    return SamplingResult(selection=selection, records=records, sequences_per_tile=seq_counts, stats=stats)


# verification ----------------------------------------------------------------------
@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


def verify_dataset(result: SamplingResult, cfg: SamplerConfig | None = None) -> list[Check]:
    """Exhaustively re-check every dataset constraint on the final records."""
    cfg = cfg or SamplerConfig()
    recs = result.records
    sel = result.selection
    checks = []

    bad = [r for r in recs if not gaps_valid(r.dates)]
    checks.append(Check("gap_months_1_to_6", not bad, f"{len(bad)} sequences with invalid gaps"))

    bad = [
        r
        for r in recs
        if len(r.dates) != 4
        or any(not FIRST_YEAR <= y <= LAST_YEAR for y, _ in r.dates)
        or list(r.dates) != sorted(set(r.dates))
    ]
    checks.append(Check("four_increasing_dates_2014_2023", not bad, f"{len(bad)} bad date sequences"))

    worst = max((f for r in recs for band in r.missing_frac for f in band), default=0.0)
    checks.append(Check("missing_per_band_le_1pct", worst <= cfg.max_missing, f"max missing fraction {worst:.4f}"))

    worst = max((c for r in recs for c in r.cloud_frac), default=0.0)
    checks.append(Check("cloud_le_20pct", worst <= cfg.max_cloud, f"max cloud fraction {worst:.4f}"))

    per_area = Counter((r.split, r.area_id) for r in recs)
    over = [k for k, n in per_area.items() if n > (cfg.train_per_area if k[0] == "train" else cfg.val_per_area)]
    top_train = max((n for (s, _), n in per_area.items() if s == "train"), default=0)
    top_val = max((n for (s, _), n in per_area.items() if s == "val"), default=0)
    checks.append(Check("per_area_caps_10_train_2_val", not over, f"max per area train={top_train} val={top_val}"))

    train_areas = {r.area_id for r in recs if r.split == "train"}
    val_areas = {r.area_id for r in recs if r.split == "val"}
    shared = train_areas & val_areas
    checks.append(Check("no_train_val_area_overlap", not shared, f"{len(shared)} shared areas"))

    n = len(sel.train) + len(sel.val)
    expected_val = n - int(round(cfg.tiles.train_fraction * n))
    split_of = {t: "train" for t in sel.train} | {t: "val" for t in sel.val}
    ok = (
        len(sel.val) == expected_val
        and not set(sel.train) & set(sel.val)
        and all(split_of.get(r.tile_id) == r.split for r in recs)
    )
    checks.append(Check("tile_split_95_5", ok, f"{len(sel.train)} train / {len(sel.val)} val tiles"))

    seqs_by_tile: dict[str, set] = defaultdict(set)
    for r in recs:
        seqs_by_tile[r.tile_id].add(r.dates)
    over = []
    for tile, split in split_of.items():
        cap = cfg.train_sequence_cap if split == "train" else cfg.val_sequence_cap
        if len(seqs_by_tile.get(tile, ())) > cap or result.sequences_per_tile.get(tile, 0) > cap:
            over.append(tile)
    top = max(result.sequences_per_tile.values(), default=0)
    checks.append(Check("per_tile_sequence_caps_1500_250", not over, f"max sequences per tile {top}"))

    dup = len(recs) - len({(r.area_id, r.tile_id, r.dates) for r in recs})
    checks.append(Check("no_duplicate_samples", dup == 0, f"{dup} duplicates"))
    return checks


def lulc_distribution(catalog: Sequence[TileRecord], records: Sequence[PatchRecord]) -> list[dict[str, str]]:
    """Mean class fraction over all catalog tiles vs. over training samples."""
    by_id = {t.tile_id: t for t in catalog}
    classes = sorted({c for t in catalog for c in t.class_props})
    train = [by_id[r.tile_id] for r in records if r.split == "train"]
    rows = []
    for c in classes:
        all_mean = float(np.mean([t.class_props.get(c, 0.0) for t in catalog])) if catalog else 0.0
        tr_mean = float(np.mean([t.class_props.get(c, 0.0) for t in train])) if train else 0.0
        rows.append({"class": c, "all_tiles": repr(all_mean), "training_samples": repr(tr_mean)})
    return rows
