"""CSV formats for tile catalogs, scene QA indexes and patch manifests.

Tile catalog (one row per tile)::

    tile_id,lat,lon,urban_frac,ecoregions,lulc_<class>,...

``ecoregions`` is a ``;``-separated list of integer ids (may be empty); each
``lulc_<class>`` column holds that class's fraction of the tile.

Scene index (one row per acquisition and spatial block)::

    tile_id,year,doy,block_row,block_col,area_id,cloud_frac,water_frac,missing_<band>,...

``area_id`` may be empty, in which case it defaults to
``<tile_id>:<block_row>:<block_col>``. Tiles that physically overlap share
area ids for their common blocks.

Patch manifest: see :data:`MANIFEST_FIELDS`; dates are ``YYYY-DDD`` joined by ``;``.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from ..chips import format_dates
from ..errors import DataError, InvalidArgumentError
from .records import PatchRecord, SceneQA, TileRecord

BANDS = ("b02", "b03", "b04", "b8a", "b11", "b12")
SCENE_FIELDS = ["tile_id", "year", "doy", "block_row", "block_col", "area_id", "cloud_frac", "water_frac"] + [
    f"missing_{b}" for b in BANDS
]
MANIFEST_FIELDS = [
    "chip_path",
    "tile_id",
    "area_id",
    "block_row",
    "block_col",
    "split",
    "dates",
    "lat",
    "lon",
    "max_missing",
    "max_cloud",
    "min_water",
]


def _open_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    fh = open(path, newline="", encoding="utf-8")
    return fh, csv.DictReader(fh)


def write_catalog(path, tiles: Sequence[TileRecord]) -> None:
    classes = sorted({c for t in tiles for c in t.class_props})
    fields = ["tile_id", "lat", "lon", "urban_frac", "ecoregions"] + [f"lulc_{c}" for c in classes]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for t in tiles:
            w.writerow(
                [t.tile_id, repr(t.lat), repr(t.lon), repr(t.urban_frac), ";".join(str(e) for e in sorted(t.ecoregions))]
                + [repr(t.class_props.get(c, 0.0)) for c in classes]
            )


def read_catalog(path) -> list[TileRecord]:
    fh, reader = _open_rows(path)
    with fh:
        fields = reader.fieldnames or []
        missing = {"tile_id", "ecoregions"} - set(fields)
        if missing:
            raise DataError(f"{path}: catalog lacks columns {sorted(missing)}")
        classes = [f for f in fields if f.startswith("lulc_")]
        tiles = []
        for rowno, row in enumerate(reader, start=2):
            try:
                ecos = [int(e) for e in row["ecoregions"].split(";") if e.strip()]
                tiles.append(
                    TileRecord(
                        tile_id=row["tile_id"],
                        class_props={c[len("lulc_") :]: float(row[c]) for c in classes},
                        ecoregions=frozenset(ecos),
                        urban_frac=float(row.get("urban_frac") or 0.0),
                        lat=float(row.get("lat") or 0.0),
                        lon=float(row.get("lon") or 0.0),
                    )
                )
            except (ValueError, TypeError, AttributeError, InvalidArgumentError) as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
    return tiles


def write_scene_index(path, scenes: Sequence[SceneQA]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCENE_FIELDS)
        for s in scenes:
            for b, (row, col) in enumerate(s.blocks):
                w.writerow(
                    [s.tile_id, s.year, s.doy, row, col, s.areas[b], repr(float(s.cloud[b])), repr(float(s.water[b]))]
                    + [repr(float(v)) for v in s.missing[b]]
                )


def read_scene_index(path) -> dict[str, list[SceneQA]]:
    """Scenes grouped by tile and sorted by date."""
    fh, reader = _open_rows(path)
    grouped: dict[tuple[str, int, int], list] = defaultdict(list)
    with fh:
        fields = reader.fieldnames or []
        required = {"tile_id", "year", "doy", "block_row", "block_col", "cloud_frac"}
        if fields and required - set(fields):
            raise DataError(f"{path}: scene index lacks columns {sorted(required - set(fields))}")
        bands = [f for f in fields if f.startswith("missing_")]
        for rowno, row in enumerate(reader, start=2):
            try:
                key = (row["tile_id"], int(row["year"]), int(row["doy"]))
                r, c = int(row["block_row"]), int(row["block_col"])
                area = row.get("area_id") or f"{row['tile_id']}:{r}:{c}"
                cloud = float(row["cloud_frac"])
                water = float(row.get("water_frac") or 0.0)
                missing = [float(row[b]) for b in bands]
                fracs = [cloud, water, *missing]
                if any(not 0.0 <= v <= 1.0 for v in fracs):
                    raise ValueError("QA fractions must lie in [0, 1]")
            except (ValueError, TypeError, KeyError) as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
            grouped[key].append(((r, c), area, cloud, water, missing, rowno))
    by_tile: dict[str, list[SceneQA]] = defaultdict(list)
    for (tile, year, doy), rows in sorted(grouped.items()):
        rows.sort(key=lambda x: x[0])
        try:
            scene = SceneQA(
                tile_id=tile,
                year=year,
                doy=doy,
                blocks=[x[0] for x in rows],
                areas=[x[1] for x in rows],
                cloud=np.array([x[2] for x in rows]),
                water=np.array([x[3] for x in rows]),
                missing=np.array([x[4] for x in rows]).reshape(len(rows), len(bands)),
            )
        except InvalidArgumentError as exc:
            raise DataError(f"{path}: row {rows[0][5]}: {exc}") from None
        by_tile[tile].append(scene)
    return dict(by_tile)


def manifest_row(rec: PatchRecord) -> dict[str, str]:
    return {
        "chip_path": rec.chip_path,
        "tile_id": rec.tile_id,
        "area_id": rec.area_id,
        "block_row": str(rec.block[0]),
        "block_col": str(rec.block[1]),
        "split": rec.split,
        "dates": format_dates(rec.dates),
        "lat": repr(float(rec.lat)),
        "lon": repr(float(rec.lon)),
        "max_missing": repr(float(rec.max_missing)),
        "max_cloud": repr(float(rec.max_cloud)),
        "min_water": repr(float(rec.min_water)),
    }


def write_patch_manifest(path, records: Sequence[PatchRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow(manifest_row(rec))
