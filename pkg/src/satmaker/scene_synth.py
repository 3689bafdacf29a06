"""Procedural DEMs and DEM-correlated multi-band scenes.

Stands in for real imagery so the whole pipeline can be trained and
evaluated on a laptop. Every output is a pure function of the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from satmaker.errors import ConfigError
from satmaker.raster_io import Raster

DEFAULT_BANDS = ("blue", "green", "red", "nir")


@dataclass(frozen=True)
class BandParams:
    """Per-band response: elevation gain, slope gain, noise amplitude, seasonal offset/amplitude."""

    elevation: float
    slope: float
    noise: float
    base: float = 0.0
    season_amp: float = 0.0


DEFAULT_BAND_PARAMS = {
    "blue": BandParams(elevation=0.25, slope=0.15, noise=0.02, base=0.15, season_amp=0.05),
    "green": BandParams(elevation=0.35, slope=0.20, noise=0.02, base=0.15, season_amp=0.08),
    "red": BandParams(elevation=0.45, slope=0.25, noise=0.02, base=0.10, season_amp=0.06),
    "nir": BandParams(elevation=0.50, slope=0.25, noise=0.02, base=0.15, season_amp=0.10),
}

_BAND_KEYS = {"blue": 1, "green": 2, "red": 3, "nir": 4}


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    octaves: int = 5
    seed: int = 0
    band_params: dict = field(default_factory=lambda: dict(DEFAULT_BAND_PARAMS))
    season_period: int = 12
    base_cells: int = 4
    slope_scale: float = 0.05

    def __post_init__(self):
        if self.size < 8:
            raise ConfigError(f"size must be >= 8, got {self.size}")
        if self.octaves < 1:
            raise ConfigError(f"octaves must be >= 1, got {self.octaves}")
        if self.season_period < 1:
            raise ConfigError("season_period must be >= 1")
        for name, p in self.band_params.items():
            if p.noise < 0:
                raise ConfigError(f"band {name!r} has negative noise amplitude")


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Uniform lattice values on a (cells+1)^2 grid, bilinearly upsampled to size^2."""
    lattice = rng.random((cells + 1, cells + 1))
    pos = np.arange(size) * (cells / size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = lattice[i0] * (1 - f)[:, None] + lattice[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _fractal(rng: np.random.Generator, size: int, octaves: int, base_cells: int) -> np.ndarray:
    field_ = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = min(base_cells * 2 ** o, size)
        field_ += amp * _value_noise(rng, size, cells)
        amp *= 0.5
    return field_


def synth_dem(cfg: SceneConfig) -> Raster:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), 0]))
    z = _fractal(rng, cfg.size, cfg.octaves, cfg.base_cells)
    lo, hi = z.min(), z.max()
    z = (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)
    return Raster(["dem"], z[None].astype(np.float32))


def slope(dem: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude (one-sided at the border)."""
    gy, gx = np.gradient(np.asarray(dem, dtype=np.float64))
    return np.hypot(gx, gy)


def elevation_response(dem: np.ndarray) -> np.ndarray:
    # smoothstep: monotone on [0, 1], flattens the extremes
    d = np.clip(dem, 0.0, 1.0)
    return d * d * (3.0 - 2.0 * d)


def slope_response(s: np.ndarray, scale: float) -> np.ndarray:
    # saturating, monotone, 0 at flat ground
    return 1.0 - np.exp(-s / scale)


def seasonal(phase: float, p: BandParams) -> float:
    return p.base + p.season_amp * math.sin(2.0 * math.pi * phase)


def _phase_key(phase: float) -> int:
    # noise repeats with the season: key on the fractional phase
    return int(round((phase % 1.0) * 1e6)) % 1_000_000


def synth_band(dem: Raster, band: str, phase: float, cfg: SceneConfig) -> Raster:
    if band not in cfg.band_params:
        raise KeyError(f"unknown band {band!r}; configured bands: {sorted(cfg.band_params)}")
    if len(dem.bands) != 1:
        raise ValueError("dem must be single-band")
    p = cfg.band_params[band]
    d = dem.data[0].astype(np.float64)
    value = (
        p.elevation * elevation_response(d)
        + p.slope * slope_response(slope(d), cfg.slope_scale)
        + seasonal(phase, p)
    )
    if p.noise > 0:
        key = _BAND_KEYS.get(band, sum(band.encode()) + 100)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed & (2**64 - 1), key, _phase_key(phase)])
        )
        n = _fractal(rng, d.shape[0], 2, cfg.base_cells)
        n = 2.0 * (n / 1.5) - 1.0  # two octaves sum to [0, 1.5]; recentre to [-1, 1]
        value = value + p.noise * n
    return Raster([band], np.clip(value, 0.0, 1.0)[None].astype(np.float32), bbox=dem.bbox)


def synth_scene(dem: Raster, phase: float, cfg: SceneConfig, bands=DEFAULT_BANDS) -> Raster:
    planes = [synth_band(dem, b, phase, cfg).data[0] for b in bands]
    return Raster(list(bands), np.stack(planes), bbox=dem.bbox)


def synth_timeseries(dem: Raster, n_steps: int, cfg: SceneConfig, band: str = "nir") -> list[Raster]:
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    return [synth_band(dem, band, t / cfg.season_period, cfg) for t in range(n_steps)]
