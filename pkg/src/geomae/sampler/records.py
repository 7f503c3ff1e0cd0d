"""Record types shared by the sampling stages."""
from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgumentError

FIRST_YEAR, LAST_YEAR = 2014, 2023
SEQUENCE_LENGTH = 4
MIN_GAP_MONTHS, MAX_GAP_MONTHS = 1, 6


def month_index(year: int, doy: int) -> int:
    """Calendar months since year 0; the day within the month is ignored."""
    d = _dt.date(int(year), 1, 1) + _dt.timedelta(days=int(doy) - 1)
    return d.year * 12 + d.month - 1


def lulc_entropy(class_props) -> float:
    """Shannon entropy (nats) of a class distribution, with 0 ln 0 = 0."""
    p = np.asarray(list(class_props.values()) if isinstance(class_props, dict) else class_props, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    class_props: dict[str, float]
    ecoregions: frozenset[int] = frozenset()
    urban_frac: float = 0.0
    lat: float = 0.0
    lon: float = 0.0

    def __post_init__(self):
        props = {str(k): float(v) for k, v in self.class_props.items()}
        if any(v < 0 or v > 1 for v in props.values()):
            raise InvalidArgumentError(f"tile {self.tile_id}: class fractions must lie in [0, 1]")
        if props and not math.isclose(sum(props.values()), 1.0, abs_tol=1e-9):
            raise InvalidArgumentError(f"tile {self.tile_id}: class fractions sum to {sum(props.values())}")
        if not 0 <= self.urban_frac <= 1:
            raise InvalidArgumentError(f"tile {self.tile_id}: urban fraction outside [0, 1]")
        object.__setattr__(self, "class_props", props)
        object.__setattr__(self, "ecoregions", frozenset(int(e) for e in self.ecoregions))

    @property
    def entropy(self) -> float:
        return lulc_entropy(self.class_props)


@dataclass
class SceneQA:
    """Aggregate QA statistics of one acquisition of one tile, per spatial block.

    ``cloud``/``water`` are ``[n_blocks]`` fractions and ``missing`` is
    ``[n_blocks, n_bands]``. ``areas`` gives each block's area key.
    """

    tile_id: str
    year: int
    doy: int
    blocks: list[tuple[int, int]]
    areas: list[str]
    cloud: np.ndarray
    water: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        if not FIRST_YEAR <= self.year <= LAST_YEAR:
            raise InvalidArgumentError(f"scene year {self.year} outside [{FIRST_YEAR}, {LAST_YEAR}]")
        if not 1 <= self.doy <= 366:
            raise InvalidArgumentError(f"day of year {self.doy} outside [1, 366]")

    @property
    def date(self) -> tuple[int, int]:
        return self.year, self.doy

    @property
    def month(self) -> int:
        return month_index(self.year, self.doy)


@dataclass
class PatchRecord:
    """One four-date sample of one 256x256 block.

    ``missing_frac`` is ``[T][bands]``; ``cloud_frac`` and ``water_frac`` are
    per timestamp.
    """

    tile_id: str
    area_id: str
    block: tuple[int, int]
    dates: tuple[tuple[int, int], ...]
    missing_frac: tuple[tuple[float, ...], ...]
    cloud_frac: tuple[float, ...]
    water_frac: tuple[float, ...] = ()
    split: str = "train"
    lat: float = 0.0
    lon: float = 0.0
    chip_path: str = field(default="", compare=False)

    @property
    def sequence_key(self) -> tuple:
        return (self.tile_id, self.dates)

    @property
    def max_missing(self) -> float:
        return max((max(b) for b in self.missing_frac if b), default=0.0)

    @property
    def max_cloud(self) -> float:
        return max(self.cloud_frac, default=0.0)

    @property
    def min_water(self) -> float:
        return min(self.water_frac, default=0.0)


def gaps_valid(dates) -> bool:
    months = [month_index(y, d) for y, d in dates]
    return all(MIN_GAP_MONTHS <= b - a <= MAX_GAP_MONTHS for a, b in zip(months, months[1:]))
