"""Comparison fills: nearest neighbour, harmonic (Laplace) interpolation, last frame, and a conv autoencoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import nn

from satmaker.errors import ConfigError, GeometryError, MissingReferenceError
from satmaker.masking import DEFAULT_FILL
from satmaker.raster_io import Raster


def _mask_array(raster: Raster, mask) -> np.ndarray:
    m = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if m.shape != raster.shape:
        raise GeometryError(f"mask shape {m.shape} != raster shape {raster.shape}")
    return m


def nearest_sources(mask: np.ndarray) -> np.ndarray:
    """Flat index of the nearest unmasked pixel for every masked pixel (row-major order).

    Ties in Euclidean distance go to the smaller row, then the smaller column.
    """
    known = np.flatnonzero(~mask)
    if known.size == 0:
        raise MissingReferenceError("every pixel is masked; nothing to fill from")
    w = mask.shape[1]
    kr, kc = np.divmod(known, w)
    holes = np.flatnonzero(mask)
    if holes.size == 0:
        return holes
    hr, hc = np.divmod(holes, w)
    tree = cKDTree(np.column_stack([kr, kc]).astype(np.float64))
    k = min(16, known.size)
    dist, idx = tree.query(np.column_stack([hr, hc]).astype(np.float64), k=k)
    dist = np.atleast_2d(dist.reshape(holes.size, -1))
    idx = np.atleast_2d(idx.reshape(holes.size, -1))
    # exact integer distances for tie resolution
    d2 = (kr[idx] - hr[:, None]) ** 2 + (kc[idx] - hc[:, None]) ** 2
    best = d2.min(axis=1, keepdims=True)
    cand = np.where(d2 == best, known[idx], np.iinfo(np.int64).max)
    out = cand.min(axis=1)
    # all k candidates tied: there may be more equidistant pixels beyond k
    saturated = (d2 == best).all(axis=1) & (k < known.size)
    for i in np.flatnonzero(saturated):
        dd = (kr - hr[i]) ** 2 + (kc - hc[i]) ** 2
        out[i] = known[np.flatnonzero(dd == dd.min())].min()
    return out


def fill_nearest(raster: Raster, mask) -> Raster:
    m = _mask_array(raster, mask)
    if not m.any():
        return raster.replace(raster.data.copy())
    src = nearest_sources(m)
    data = raster.data.copy()
    flat = data.reshape(data.shape[0], -1)
    flat[:, np.flatnonzero(m)] = flat[:, src]
    return raster.replace(data)


def fill_harmonic(raster: Raster, mask, iters: int = 5000, tol: float = 1e-6) -> Raster:
    """Jacobi sweeps of the discrete Laplace equation with observed pixels held fixed.

    Neighbours outside the image are ignored (zero-flux border).
    """
    m = _mask_array(raster, mask)
    if m.all():
        raise MissingReferenceError("every pixel is masked; nothing to fill from")
    if not m.any():
        return raster.replace(raster.data.copy())
    out = raster.data.astype(np.float64)
    h, w = m.shape
    ones = np.ones((h, w))
    nbr_count = np.zeros((h, w))
    nbr_count[1:] += ones[:-1]
    nbr_count[:-1] += ones[1:]
    nbr_count[:, 1:] += ones[:, :-1]
    nbr_count[:, :-1] += ones[:, 1:]
    for b in range(out.shape[0]):
        u = out[b]
        u[m] = u[~m].mean()
        for _ in range(iters):
            s = np.zeros_like(u)
            s[1:] += u[:-1]
            s[:-1] += u[1:]
            s[:, 1:] += u[:, :-1]
            s[:, :-1] += u[:, 1:]
            new = s / nbr_count
            delta = np.abs(new[m] - u[m]).max()
            u[m] = new[m]
            if delta < tol:
                break
    return raster.replace(out.astype(np.float32))


def fill_previous(raster: Raster, mask, previous: Raster) -> Raster:
    """Temporal baseline: masked pixels copy the previous frame."""
    m = _mask_array(raster, mask)
    if previous.shape != raster.shape or previous.bands != raster.bands:
        raise GeometryError("previous frame does not match the target raster")
    data = raster.data.copy()
    data[:, m] = previous.data[:, m]
    return raster.replace(data)


class Autoencoder(nn.Module):
    """Two-stage conv encoder/decoder on (observed, mask) input."""

    def __init__(self, width: int = 32, bottleneck: int = 64):
        super().__init__()
        self.width = width
        self.bottleneck = bottleneck
        self.enc1 = nn.Conv2d(2, width, 3, padding=1)
        self.enc2 = nn.Conv2d(width, bottleneck, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(bottleneck, bottleneck, 3, stride=2, padding=1)
        self.dec3 = nn.ConvTranspose2d(bottleneck, bottleneck, 4, stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(bottleneck, width, 4, stride=2, padding=1)
        self.dec1 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, observed: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = torch.cat([observed, mask.to(observed.dtype)], dim=1)
        h = F.relu(self.enc1(x))
        h = F.relu(self.enc2(h))
        h = F.relu(self.enc3(h))
        h = F.relu(self.dec3(h))
        h = F.relu(self.dec2(h))
        return torch.sigmoid(self.dec1(h))


@dataclass
class AutoencoderParams:
    model: Autoencoder
    seed: int
    losses: list


@dataclass(frozen=True)
class AEConfig:
    epochs: int = 30
    batch: int = 16
    lr: float = 1e-3
    width: int = 32
    bottleneck: int = 64
    ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)


def _ae_batch(truth: torch.Tensor, gen: torch.Generator, ratios) -> tuple[torch.Tensor, torch.Tensor]:
    b, _, h, w = truth.shape
    r = torch.tensor(ratios, dtype=truth.dtype)[torch.randint(len(ratios), (b,), generator=gen)]
    mask = torch.rand(truth.shape, generator=gen, dtype=truth.dtype) < r.view(b, 1, 1, 1)
    observed = torch.where(mask, torch.full_like(truth, DEFAULT_FILL), truth)
    return observed, mask


def train_autoencoder(dataset, cfg: AEConfig = AEConfig(), seed: int = 0) -> AutoencoderParams:
    """Mean-squared reconstruction training on freshly masked copies of ``dataset`` images.

    ``dataset`` is a sequence of single-band rasters (or a (N, 1, H, W) tensor).
    """
    if dataset is None or len(dataset) == 0:
        raise ConfigError("autoencoder needs a non-empty dataset")
    if torch.is_tensor(dataset):
        truth = dataset.to(torch.float32)
    else:
        truth = torch.stack([torch.from_numpy(r.data[:1].copy()) for r in dataset]).to(torch.float32)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Autoencoder(cfg.width, cfg.bottleneck)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses = []
    n = truth.shape[0]
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        running, batches = 0.0, 0
        for i in range(0, n, cfg.batch):
            x = truth[order[i:i + cfg.batch]]
            observed, mask = _ae_batch(x, gen, cfg.ratios)
            loss = F.mse_loss(model(observed, mask), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach())
            batches += 1
        losses.append(running / batches)
    return AutoencoderParams(model, seed, losses)


def ae_fill_batch(params: AutoencoderParams, observed: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        pred = params.model(observed.to(torch.float32), mask)
    return torch.where(mask, pred.to(observed.dtype), observed)


def ae_fill(params: AutoencoderParams, raster: Raster, mask) -> Raster:
    m = _mask_array(raster, mask)
    data = raster.data.copy()
    for b in range(data.shape[0]):
        obs = torch.from_numpy(data[b].copy())[None, None]
        obs = torch.where(torch.from_numpy(m)[None, None], torch.full_like(obs, DEFAULT_FILL), obs)
        data[b] = ae_fill_batch(params, obs, torch.from_numpy(m)[None, None])[0, 0].numpy()
    return raster.replace(data)
