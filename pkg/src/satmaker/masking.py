"""Quality filtering, exact-count random masks, and mask application."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from satmaker.errors import GeometryError
from satmaker.raster_io import Raster, read_raster, write_raster

DEFAULT_QA_THRESHOLD = 0.05
DEFAULT_FILL = 0.5


@dataclass
class Mask:
    """Boolean grid, True marks a missing pixel."""

    data: np.ndarray
    ratio: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def from_array(cls, data, valid=None, seed=None) -> "Mask":
        data = np.asarray(data, dtype=bool)
        n_valid = data.size if valid is None else int(np.asarray(valid, dtype=bool).sum())
        ratio = float(data.sum()) / n_valid if n_valid else 0.0
        return cls(data, ratio, seed)


def quality_filter(raster: Raster, qa: Mask, threshold: float = DEFAULT_QA_THRESHOLD) -> bool:
    """Accept a scene unless its low-quality fraction exceeds ``threshold``."""
    if qa.shape != raster.shape:
        raise GeometryError(f"qa shape {qa.shape} != raster shape {raster.shape}")
    return int(qa.data.sum()) / qa.data.size <= threshold


def random_mask(shape, missing_ratio: float, seed: int, valid: Mask | np.ndarray | None = None) -> Mask:
    if not 0.0 <= missing_ratio <= 0.95:
        raise ValueError(f"missing_ratio must lie in [0, 0.95], got {missing_ratio}")
    h, w = shape
    if valid is None:
        valid_arr = np.ones((h, w), dtype=bool)
    else:
        valid_arr = np.asarray(getattr(valid, "data", valid), dtype=bool)
        if valid_arr.shape != (h, w):
            raise GeometryError(f"valid shape {valid_arr.shape} != {(h, w)}")
    candidates = np.flatnonzero(valid_arr)
    k = int(math.floor(missing_ratio * candidates.size + 0.5))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    chosen = rng.permutation(candidates)[:k]
    data = np.zeros(h * w, dtype=bool)
    data[chosen] = True
    ratio = k / candidates.size if candidates.size else 0.0
    return Mask(data.reshape(h, w), ratio, seed)


def apply_mask(raster: Raster, mask: Mask, fill: float = DEFAULT_FILL) -> Raster:
    if mask.shape != raster.shape:
        raise GeometryError(f"mask shape {mask.shape} != raster shape {raster.shape}")
    data = raster.data.copy()
    data[:, mask.data] = fill
    return raster.replace(data)


def mask_to_raster(mask: Mask) -> Raster:
    return Raster(["mask"], mask.data[None].astype(np.float32))


def mask_from_raster(raster: Raster, seed=None) -> Mask:
    if raster.bands != ["mask"]:
        raise ValueError(f"expected a single 'mask' band, got {raster.bands}")
    values = raster.data[0]
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError("mask samples must be 0.0 or 1.0")
    return Mask.from_array(values == 1.0, seed=seed)


def save_mask(mask: Mask, path) -> None:
    write_raster(mask_to_raster(mask), path)


def load_mask(path, seed=None) -> Mask:
    return mask_from_raster(read_raster(path), seed=seed)
