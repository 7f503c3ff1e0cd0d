"""Deterministic synthetic stand-ins for HLS chips, tile catalogs and labelled sets."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .chips import format_dates, write_chip, write_manifest
from .seeding import numpy_rng

BANDS = ("blue", "green", "red", "nir_narrow", "swir1", "swir2")


# Approximate surface reflectance of water, green vegetation, bare soil and
# built-up surfaces in the six bands (blue, green, red, NIR, SWIR1, SWIR2).
ENDMEMBERS = np.array(
    [
        [0.06, 0.05, 0.03, 0.02, 0.01, 0.01],
        [0.03, 0.07, 0.04, 0.40, 0.20, 0.09],
        [0.10, 0.15, 0.20, 0.28, 0.38, 0.33],
        [0.14, 0.15, 0.16, 0.20, 0.24, 0.22],
    ]
)


def synthetic_chip(rng: np.random.Generator, doys, channels: int = 6, size: int = 32) -> np.ndarray:
    """Smooth reflectance-like ``[T, C, size, size]`` float32 chip.

    Linear mixture of four land-cover spectra with smoothly varying
    abundances, a seasonal green-up scaling the vegetation spectrum, a
    per-chip brightness factor and a little pixel noise.
    """
    T = len(doys)
    k = ENDMEMBERS.shape[0]
    spectra = np.resize(ENDMEMBERS, (k, channels)) if channels != ENDMEMBERS.shape[1] else ENDMEMBERS
    coords = np.linspace(-1.0, 1.0, size)
    logits = (
        rng.normal(0.0, 1.5, (k, 1, 1))
        + rng.normal(0.0, 1.0, (k, 1, 1)) * coords[None, :, None]
        + rng.normal(0.0, 1.0, (k, 1, 1)) * coords[None, None, :]
    )
    abundance = np.exp(logits - logits.max(axis=0, keepdims=True))
    abundance /= abundance.sum(axis=0, keepdims=True)  # [k, H, W]
    phase = rng.uniform(0, 2 * np.pi)
    green = 0.7 + 0.3 * np.sin(2 * np.pi * np.asarray(doys, dtype=np.float64) / 365.0 + phase)  # [T]
    scale = np.ones((T, k))
    scale[:, 1] = green
    brightness = rng.uniform(0.8, 1.2)
    x = brightness * np.einsum("tk,kc,khw->tchw", scale, spectra, abundance)
    x = x + rng.normal(0.0, 0.005, (T, channels, size, size))
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def random_dates(rng: np.random.Generator, T: int = 4) -> list[tuple[int, int]]:
    """Increasing (year, doy) pairs one to six months apart."""
    year = int(rng.integers(2015, 2022))
    doy = int(rng.integers(1, 60))
    out = []
    for _ in range(T):
        out.append((year, doy))
        doy += int(rng.integers(31, 150))
        if doy > 365:
            year, doy = year + 1, doy - 365
    return out


def make_pretraining_set(out_dir, n: int = 1000, seed: int = 0, size: int = 32, T: int = 4, channels: int = 6) -> Path:
    """Write ``n`` chips plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    rng = numpy_rng(seed, "synthetic/chips")
    rows = []
    for k in range(n):
        dates = random_dates(rng, T)
        lat, lon = float(rng.uniform(-60, 70)), float(rng.uniform(-180, 180))
        chip = synthetic_chip(rng, [d for _, d in dates], channels, size)
        rel = f"chips/chip_{k:05d}.chip"
        write_chip(out_dir / rel, chip)
        rows.append(
            {"chip_path": rel, "lat": f"{lat:.4f}", "lon": f"{lon:.4f}", "dates": format_dates(dates), "split": "train"}
        )
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows, ["chip_path", "lat", "lon", "dates", "split"])
    return manifest


def make_labelled_set(
    out_dir,
    task: str,
    n: int = 96,
    n_classes: int = 2,
    seed: int = 0,
    size: int = 32,
    T: int = 1,
    channels: int = 6,
    aux_channels: int = 10,
    years=(2018, 2019, 2020, 2021),
) -> Path:
    """Labelled chips for ``classify``, ``segment`` or ``regress``.

    Labels are simple functions of the chip so that heads can learn them:
    class = brightness bucket of the red band, segmentation mask =
    per-pixel threshold of NIR, regression target = linear in the mean NIR and
    the first auxiliary variable. Splits cycle train/train/val/test.
    """
    out_dir = Path(out_dir)
    rng = numpy_rng(seed, f"synthetic/{task}")
    rows = []
    splits = ("train", "train", "val", "test")
    for k in range(n):
        dates = random_dates(rng, T)
        chip = synthetic_chip(rng, [d for _, d in dates], channels, size)
        rel = f"chips/chip_{k:05d}.chip"
        row = {"chip_path": rel, "lat": "", "lon": "", "dates": format_dates(dates), "split": splits[k % 4]}
        if task == "classify":
            k_cls = (k // len(splits)) % n_classes  # every split sees every class
            chip[:, 2] = np.clip(chip[:, 2] * 0.2 + (k_cls + 0.5) / n_classes * 0.4, 0, 1)
            row["label"] = str(k_cls)
        elif task == "segment":
            yy, xx = np.mgrid[0:size, 0:size]
            cy, cx, r = rng.uniform(0.25 * size, 0.75 * size, 2).tolist() + [rng.uniform(0.15, 0.35) * size]
            mask = (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r).astype(np.int64) % n_classes
            chip[:, 3] = np.where(mask[None] == 1, 0.6, 0.1) + rng.normal(0, 0.01, chip[:, 3].shape)
            lrel = f"labels/label_{k:05d}.chip"
            write_chip(out_dir / lrel, mask.astype(np.float32))
            row["label_path"] = lrel
        elif task == "regress":
            aux = rng.normal(0.0, 1.0, (aux_channels, 1, 1)).astype(np.float32)
            arel = f"aux/aux_{k:05d}.chip"
            write_chip(out_dir / arel, aux)
            target = 10.0 * float(chip[:, 3].mean()) + 0.5 * float(aux[0, 0, 0])
            row["aux_path"] = arel
            row["target"] = repr(target)
            row["year"] = str(years[k % len(years)])
        else:
            raise ValueError(f"unknown task {task!r}")
        write_chip(out_dir / rel, chip)
        rows.append(row)
    fields = ["chip_path", "lat", "lon", "dates", "split"]
    fields += {"classify": ["label"], "segment": ["label_path"], "regress": ["aux_path", "target", "year"]}[task]
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows, fields)
    return manifest
