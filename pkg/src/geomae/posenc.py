"""Sinusoidal position encodings and the geotemporal metadata bias.

All encodings use the same 1D layout: for ``dim`` channels and frequency
index ``k < dim/2`` the angular rate is ``10000 ** (-2k/dim)``; the first half
of a row holds the sines and the second half the cosines.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidArgumentError
from .patchify import TokenGrid

__all__ = [
    "PosTable3D",
    "GeoTemporalMetadata",
    "MetadataBiasParams",
    "sincos_1d",
    "default_split",
    "sincos_3d",
    "encode_location",
    "encode_date",
    "metadata_bias",
    "apply_metadata_bias",
    "sample_drop_flags",
    "draw_drop_flags",
]


def sincos_1d(positions, dim: int) -> np.ndarray:
    """Encode scalar positions as ``[N, dim]`` float64 rows (sin half, cos half)."""
    if dim < 2 or dim % 2:
        raise InvalidArgumentError(f"encoding dim must be even and >= 2, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = np.outer(pos, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _round_to_even(x: float) -> int:
    return 2 * int(round(x / 2.0))


def default_split(dim: int) -> tuple[int, int, int]:
    """Channel allocation ``(time, height, width)`` for a 3D table.

    Time takes ``round_to_even(dim/4)``; the rest is shared by the two
    spatial axes, height taking the extra pair when the remainder is not a
    multiple of four (``dim=8`` gives ``(2, 4, 2)``).
    """
    if dim % 2:
        raise InvalidArgumentError(f"dim must be even, got {dim}")
    dt = _round_to_even(dim / 4)
    rest = dim - dt
    dw = 2 * (rest // 4)
    dh = rest - dw
    return dt, dh, dw


@dataclass(frozen=True)
class PosTable3D:
    values: np.ndarray  # [T*Gh*Gw, D]
    dims: tuple[int, int, int]
    split: tuple[int, int, int]

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def coords(self, index: int) -> tuple[int, int, int]:
        _, gh, gw = self.dims
        t, rem = divmod(index, gh * gw)
        i, j = divmod(rem, gw)
        return t, i, j


def sincos_3d(T: int, Gh: int, Gw: int, D: int, split: Sequence[int] | None = None) -> PosTable3D:
    """Factorised table: each row concatenates the 1D codes of its (t, i, j)."""
    if min(T, Gh, Gw) < 1:
        raise InvalidArgumentError(f"grid sizes must be positive, got {(T, Gh, Gw)}")
    split = tuple(default_split(D) if split is None else split)
    if len(split) != 3 or sum(split) != D or any(s < 2 or s % 2 for s in split):
        raise InvalidArgumentError(f"invalid channel split {split} for D={D}")
    dt, dh, dw = split
    t, i, j = np.meshgrid(np.arange(T), np.arange(Gh), np.arange(Gw), indexing="ij")
    values = np.concatenate(
        [
            sincos_1d(t.reshape(-1), dt),
            sincos_1d(i.reshape(-1), dh),
            sincos_1d(j.reshape(-1), dw),
        ],
        axis=1,
    )
    return PosTable3D(values=values, dims=(T, Gh, Gw), split=split)


def _check_quarter(D: int) -> None:
    if D % 4 or D < 4:
        raise InvalidArgumentError(f"metadata encoding dim must be a positive multiple of 4, got {D}")


def encode_location(lat: float, lon: float, D: int) -> np.ndarray:
    """``sincos(lat) || sincos(lon)`` on raw degree values, each half ``D/2`` wide."""
    _check_quarter(D)
    if not -90.0 <= lat <= 90.0:
        raise InvalidArgumentError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise InvalidArgumentError(f"longitude {lon} outside [-180, 180]")
    half = D // 2
    return np.concatenate([sincos_1d([lat], half)[0], sincos_1d([lon], half)[0]])


def encode_date(year: int, doy: int, D: int) -> np.ndarray:
    """``sincos(year) || sincos(doy)``; day of year accepted in [1, 366]."""
    _check_quarter(D)
    if not 1 <= doy <= 366:
        raise InvalidArgumentError(f"day of year {doy} outside [1, 366]")
    half = D // 2
    return np.concatenate([sincos_1d([year], half)[0], sincos_1d([doy], half)[0]])


@dataclass(frozen=True)
class GeoTemporalMetadata:
    lat: float
    lon: float
    dates: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidArgumentError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidArgumentError(f"longitude {self.lon} outside [-180, 180]")
        dates = tuple((int(y), int(d)) for y, d in self.dates)
        for _, doy in dates:
            if not 1 <= doy <= 366:
                raise InvalidArgumentError(f"day of year {doy} outside [1, 366]")
        object.__setattr__(self, "dates", dates)


@dataclass
class MetadataBiasParams:
    """Learned mixing weights for the two metadata terms.

    The weights may be plain floats or (learnable) scalar tensors.
    """

    w_time: float | torch.Tensor = 1.0
    w_loc: float | torch.Tensor = 1.0
    drop_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise InvalidArgumentError(f"drop_prob must be in [0, 1], got {self.drop_prob}")


def _per_sample_flags(flag, batch: int) -> torch.Tensor:
    t = torch.as_tensor(flag, dtype=torch.bool).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise InvalidArgumentError(f"expected {batch} drop flags, got {t.numel()}")
    return t


def metadata_bias(
    meta: Sequence[GeoTemporalMetadata],
    dims: tuple[int, int, int],
    D: int,
    params: MetadataBiasParams,
    drop_time=False,
    drop_loc=False,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """The additive term ``[B, L, D]`` that :func:`apply_metadata_bias` adds."""
    T, gh, gw = dims
    batch = len(meta)
    for m in meta:
        if len(m.dates) != T:
            raise InvalidArgumentError(f"metadata has {len(m.dates)} dates but the grid has T={T}")
    date_enc = torch.as_tensor(
        np.stack([np.stack([encode_date(y, d, D) for y, d in m.dates]) for m in meta]), dtype=dtype
    )  # [B, T, D]
    loc_enc = torch.as_tensor(np.stack([encode_location(m.lat, m.lon, D) for m in meta]), dtype=dtype)
    keep_time = (~_per_sample_flags(drop_time, batch)).to(dtype).view(batch, 1, 1)
    keep_loc = (~_per_sample_flags(drop_loc, batch)).to(dtype).view(batch, 1, 1)
    time_term = (keep_time * date_enc).repeat_interleave(gh * gw, dim=1)
    loc_term = (keep_loc * loc_enc.unsqueeze(1)).expand(batch, T * gh * gw, D)
    return params.w_time * time_term + params.w_loc * loc_term


def apply_metadata_bias(
    tokens: TokenGrid,
    meta: GeoTemporalMetadata | Sequence[GeoTemporalMetadata],
    params: MetadataBiasParams,
    drop_time=False,
    drop_loc=False,
) -> TokenGrid:
    """Add the weighted date (per frame) and location encodings to every token.

    ``drop_time``/``drop_loc`` are booleans or per-sample boolean sequences;
    a dropped term is omitted, which leaves the tokens bit-identical.
    """
    data = tokens.data
    B, L, D = data.shape
    if isinstance(meta, GeoTemporalMetadata):
        meta = [meta] * B
    if len(meta) != B:
        raise InvalidArgumentError(f"got metadata for {len(meta)} samples, batch has {B}")
    T, gh, gw = tokens.dims
    if L != T * gh * gw:
        raise InvalidArgumentError("token count does not match grid dims")
    dt = _per_sample_flags(drop_time, B)
    dl = _per_sample_flags(drop_loc, B)
    if bool(dt.all()) and bool(dl.all()):
        return tokens
    bias = metadata_bias(meta, tokens.dims, D, params, dt, dl, dtype=data.dtype)
    return dataclasses.replace(tokens, data=data + bias)


def sample_drop_flags(drop_prob: float, rng_seed: int) -> tuple[bool, bool]:
    """Two independent Bernoulli(drop_prob) draws: ``(drop_time, drop_loc)``."""
    flags = draw_drop_flags(drop_prob, np.random.default_rng(rng_seed), 1)
    return bool(flags[0, 0]), bool(flags[0, 1])


def draw_drop_flags(drop_prob: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """``[n, 2]`` boolean array of (drop_time, drop_loc) flags."""
    if not 0.0 <= drop_prob <= 1.0:
        raise InvalidArgumentError(f"drop_prob must be in [0, 1], got {drop_prob}")
    return rng.random((n, 2)) < drop_prob
