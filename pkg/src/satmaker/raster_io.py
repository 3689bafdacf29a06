"""Raster container, ``.rsr`` serialization, overlapped tiling and previews.

The ``.rsr`` layout is one UTF-8 JSON header line terminated by ``\\n``::

    {"magic":"RSR1","bands":[...],"height":H,"width":W,"dtype":"f32le","bbox":[...]|null}

followed immediately by ``bands * H * W`` little-endian float32 samples,
band-major then row-major.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from satmaker.errors import FormatError, GeometryError, SizeError, TruncationError

MAGIC = "RSR1"
DTYPE = "f32le"
_LE_F32 = np.dtype("<f4")


@dataclass
class Raster:
    """A ``bands x H x W`` grid of samples with band names.

    ``data`` is always held as float32 so that it round-trips bit-exactly
    through the container.
    """

    bands: list[str]
    data: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    bbox: tuple[float, float, float, float] | None = None
    nodata: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.bands = [str(b) for b in self.bands]
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise GeometryError(f"raster data must be 3-D (bands, H, W), got shape {data.shape}")
        if data.shape[0] != len(self.bands):
            raise GeometryError(f"{len(self.bands)} band names for {data.shape[0]} planes")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise GeometryError(f"empty raster {data.shape}")
        if len(set(self.bands)) != len(self.bands):
            raise GeometryError(f"duplicate band names {self.bands}")
        lo, hi = (float(v) for v in self.value_range)
        if not np.all(np.isfinite(data)):
            raise ValueError("raster contains non-finite samples")
        if data.size and (data.min() < lo or data.max() > hi):
            raise ValueError(
                f"samples outside value_range [{lo}, {hi}]: min={data.min()}, max={data.max()}"
            )
        self.value_range = (lo, hi)
        if self.bbox is not None:
            self.bbox = tuple(float(v) for v in self.bbox)
            if len(self.bbox) != 4:
                raise ValueError("bbox must be (lat_min, lat_max, lon_min, lon_max)")
        if self.nodata is not None:
            self.nodata = np.asarray(self.nodata, dtype=bool)
            if self.nodata.shape != data.shape[1:]:
                raise GeometryError(f"nodata shape {self.nodata.shape} != {data.shape[1:]}")
        self.data = data

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def band(self, name: str) -> np.ndarray:
        try:
            idx = self.bands.index(name)
        except ValueError:
            raise KeyError(f"band {name!r} not in {self.bands}") from None
        return self.data[idx]

    def select(self, name: str) -> "Raster":
        """Single-band view of ``name`` as its own raster."""
        return Raster([name], self.band(name)[None].copy(), self.value_range, self.bbox, self.nodata)

    def replace(self, data: np.ndarray, bands: list[str] | None = None) -> "Raster":
        return Raster(bands or list(self.bands), data, self.value_range, self.bbox, self.nodata)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.value_range == other.value_range
            and self.bbox == other.bbox
            and np.array_equal(self.data, other.data)
        )


def _header_bytes(raster: Raster) -> bytes:
    header = {
        "magic": MAGIC,
        "bands": raster.bands,
        "height": raster.height,
        "width": raster.width,
        "dtype": DTYPE,
        "bbox": list(raster.bbox) if raster.bbox is not None else None,
    }
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def write_raster(raster: Raster, path) -> None:
    # Re-validate: a caller may have mutated .data in place.
    raster = Raster(raster.bands, raster.data, raster.value_range, raster.bbox)
    payload = raster.data.astype(_LE_F32, copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_header_bytes(raster))
        fh.write(payload)


def _require(header: dict, key: str, kind):
    if key not in header:
        raise FormatError(f"header missing field {key!r}")
    value = header[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise FormatError(f"header field {key!r} has invalid value {value!r}")
    return value


def read_raster(path, value_range: tuple[float, float] = (0.0, 1.0)) -> Raster:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError("header line is not terminated")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    if header.get("magic") != MAGIC:
        raise FormatError(f"header field 'magic' is {header.get('magic')!r}, expected {MAGIC!r}")
    if header.get("dtype") != DTYPE:
        raise FormatError(f"header field 'dtype' is {header.get('dtype')!r}, expected {DTYPE!r}")
    bands = _require(header, "bands", list)
    if not all(isinstance(b, str) for b in bands) or not bands:
        raise FormatError(f"header field 'bands' has invalid value {bands!r}")
    height = _require(header, "height", int)
    width = _require(header, "width", int)
    if height < 1 or width < 1:
        raise FormatError(f"header field 'height'/'width' must be positive, got {height}x{width}")
    if "bbox" not in header:
        raise FormatError("header missing field 'bbox'")
    bbox = header["bbox"]
    if bbox is not None and (
        not isinstance(bbox, list) or len(bbox) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)
    ):
        raise FormatError(f"header field 'bbox' has invalid value {bbox!r}")

    payload = raw[newline + 1:]
    expected = len(bands) * height * width * 4
    if len(payload) != expected:
        raise TruncationError(
            f"payload holds {len(payload)} bytes, header declares {len(bands)}x{height}x{width} "
            f"float32 samples ({expected} bytes)"
        )
    data = np.frombuffer(payload, dtype=_LE_F32).reshape(len(bands), height, width)
    return Raster(bands, data.astype(np.float32), value_range, tuple(bbox) if bbox else None)


@dataclass
class TileSet:
    tiles: list[Raster]
    origins: list[tuple[int, int]]
    tile_size: int
    stride: int
    source_shape: tuple[int, int]


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def tile_origins(extent: int, tile_size: int, stride: int) -> list[int]:
    """Origins along one axis; the last one is clamped to end at the edge."""
    origins = list(range(0, extent - tile_size + 1, stride))
    if origins[-1] + tile_size < extent:
        origins.append(extent - tile_size)
    return origins


def tile(raster: Raster, tile_size: int, overlap_frac: float = 0.5) -> TileSet:
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError(f"overlap_frac must lie in [0, 1), got {overlap_frac}")
    h, w = raster.shape
    if tile_size < 1 or tile_size > min(h, w):
        raise SizeError(f"tile_size {tile_size} exceeds image extent {h}x{w}")
    overlap = _half_up(overlap_frac * tile_size)
    stride = tile_size - overlap
    if stride < 1:
        raise SizeError(f"overlap {overlap} leaves no stride for tile_size {tile_size}")
    rows = tile_origins(h, tile_size, stride)
    cols = tile_origins(w, tile_size, stride)
    origins = [(r, c) for r in rows for c in cols]
    tiles = []
    for r, c in origins:
        nodata = None if raster.nodata is None else raster.nodata[r:r + tile_size, c:c + tile_size]
        tiles.append(Raster(
            list(raster.bands),
            raster.data[:, r:r + tile_size, c:c + tile_size].copy(),
            raster.value_range,
            raster.bbox,
            nodata,
        ))
    return TileSet(tiles, origins, tile_size, stride, (h, w))


def coverage_count(tileset: TileSet) -> np.ndarray:
    count = np.zeros(tileset.source_shape, dtype=np.int64)
    n = tileset.tile_size
    for r, c in tileset.origins:
        count[r:r + n, c:c + n] += 1
    return count


def untile(tileset: TileSet) -> Raster:
    """Reassemble a scene; overlapping pixels take the mean of their tiles."""
    if not tileset.tiles or len(tileset.tiles) != len(tileset.origins):
        raise GeometryError("tile and origin lists are empty or of different length")
    h, w = tileset.source_shape
    n = tileset.tile_size
    first = tileset.tiles[0]
    acc = np.zeros((len(first.bands), h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for t, (r, c) in zip(tileset.tiles, tileset.origins):
        if t.shape != (n, n) or t.bands != first.bands:
            raise GeometryError(f"tile at {(r, c)} has shape {t.shape} / bands {t.bands}")
        if r < 0 or c < 0 or r + n > h or c + n > w:
            raise GeometryError(f"tile origin {(r, c)} falls outside source {h}x{w}")
        # float64 accumulation keeps the mean of identical float32 values exact
        acc[:, r:r + n, c:c + n] += t.data
        count[r:r + n, c:c + n] += 1
    if (count == 0).any():
        raise GeometryError(f"{int((count == 0).sum())} source pixels are not covered by any tile")
    data = (acc / count).astype(np.float32)
    return Raster(list(first.bands), data, first.value_range, first.bbox)


def preview_values(values: np.ndarray, gamma: float = 1.2) -> np.ndarray:
    """Map unit-interval samples to 8-bit with ``round(255 * v ** (1 / gamma))``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v ** (1.0 / gamma) + 0.5).astype(np.uint8)


def export_preview(raster: Raster, band: str, gamma: float = 1.2, path=None) -> np.ndarray:
    """Grayscale gamma-corrected preview of one band; written as PNG when ``path`` is set."""
    img = preview_values(raster.band(band), gamma)
    if path is not None:
        from PIL import Image

        Image.fromarray(img, mode="L").save(path, format="PNG")
    return img
