"""Synthetic tile catalogs and scene QA indexes for desk-scale runs."""
from __future__ import annotations

import numpy as np

from ..seeding import numpy_rng
from .io import BANDS
from .records import SceneQA, TileRecord

CLASSES = (
    "forest_closed",
    "forest_open",
    "shrubs",
    "herbaceous",
    "cropland",
    "built_up",
    "bare",
    "snow_ice",
    "wetland",
    "water",
)


def make_catalog(n_tiles: int = 2000, n_ecoregions: int = 300, seed: int = 0) -> list[TileRecord]:
    """Sparse Dirichlet class mixtures; each tile touches one to three ecoregions.

    A share of tiles is almost pure bare ground (deserts) or open water.
    """
    rng = numpy_rng(seed, "synthetic/catalog")
    k = len(CLASSES)
    tiles = []
    for i in range(n_tiles):
        u = rng.random()
        if u < 0.05:
            props = np.full(k, 0.01 / (k - 1))
            props[CLASSES.index("bare")] = 0.99
        elif u < 0.10:
            props = np.full(k, 0.02 / (k - 1))
            props[CLASSES.index("water")] = 0.98
        else:
            props = rng.dirichlet(np.full(k, 0.3))
        props = props / props.sum()
        n_eco = int(rng.integers(1, 4))
        # ecoregions are spatially clustered: neighbours in id share regions
        base = int(i * n_ecoregions / n_tiles)
        ecos = {int((base + rng.integers(-3, 4)) % n_ecoregions) for _ in range(n_eco)}
        tiles.append(
            TileRecord(
                tile_id=f"T{i:05d}",
                class_props={c: float(p) for c, p in zip(CLASSES, props)},
                ecoregions=frozenset(ecos),
                urban_frac=float(props[CLASSES.index("built_up")]),
                lat=float(np.round(rng.uniform(-60, 75), 4)),
                lon=float(np.round(rng.uniform(-180, 180), 4)),
            )
        )
    return tiles


def make_scenes(
    catalog: list[TileRecord],
    n_scenes: int = 24,
    blocks: tuple[int, int] = (2, 2),
    seed: int = 0,
    overlap_every: int = 10,
) -> list[SceneQA]:
    """Roughly monthly acquisitions with per-block cloud, water and missing stats.

    Every ``overlap_every``-th tile overlaps its predecessor: its block (0, 0)
    carries the area id of the predecessor's block (0, last column).
    """
    rng = numpy_rng(seed, "synthetic/scenes")
    nr, nc = blocks
    block_list = [(r, c) for r in range(nr) for c in range(nc)]
    scenes = []
    for ti, tile in enumerate(catalog):
        areas = [f"{tile.tile_id}:{r}:{c}" for r, c in block_list]
        if overlap_every and ti and ti % overlap_every == 0:
            areas[0] = f"{catalog[ti - 1].tile_id}:0:{nc - 1}"
        water_prop = tile.class_props.get("water", 0.0)
        sea_blocks = rng.random(len(block_list)) < water_prop
        start_year = int(rng.integers(2014, 2021))
        month0 = int(rng.integers(0, 12))
        for s in range(n_scenes):
            month = month0 + s
            year = start_year + month // 12
            if year > 2023:
                break
            doy = min(365, 1 + (month % 12) * 30 + int(rng.integers(0, 28)))
            cloud = np.where(rng.random(len(block_list)) < 0.7, rng.uniform(0, 0.1, len(block_list)),
                             rng.uniform(0, 1, len(block_list)))
            water = np.where(sea_blocks, 1.0, np.minimum(1.0, rng.uniform(0, 2 * water_prop, len(block_list))))
            missing = np.where(
                rng.random((len(block_list), len(BANDS))) < 0.9,
                0.0,
                rng.uniform(0, 0.05, (len(block_list), len(BANDS))),
            )
            scenes.append(
                SceneQA(
                    tile_id=tile.tile_id,
                    year=year,
                    doy=doy,
                    blocks=list(block_list),
                    areas=list(areas),
                    cloud=np.round(cloud, 4),
                    water=np.round(water, 4),
                    missing=np.round(missing, 4),
                )
            )
    return scenes
