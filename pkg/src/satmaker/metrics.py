"""Reconstruction metrics over full images or masked regions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from satmaker.errors import ContractError, GeometryError, SizeError

PSNR_CAP = 99.0
SSIM_WINDOW = 8


def _plane(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    while x.ndim > 2 and x.shape[0] == 1:
        x = x[0]
    return x


def _scoped(pred, truth, scope):
    p, t = _plane(pred), _plane(truth)
    if p.shape != t.shape:
        raise GeometryError(f"pred shape {p.shape} != truth shape {t.shape}")
    if scope is None or (isinstance(scope, str) and scope == "full"):
        return p.ravel(), t.ravel()
    sel = np.asarray(getattr(scope, "data", scope), dtype=bool)
    if sel.shape != p.shape[-2:]:
        raise GeometryError(f"scope shape {sel.shape} != image shape {p.shape}")
    if p.ndim == 3:
        sel = np.broadcast_to(sel, p.shape)
    if not sel.any():
        raise ContractError("scope selects no pixels")
    return p[sel], t[sel]


def rmse(pred, truth, scope=None) -> float:
    p, t = _scoped(pred, truth, scope)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth, scope=None) -> float:
    p, t = _scoped(pred, truth, scope)
    return float(np.mean(np.abs(p - t)))


def psnr_from_rmse(err: float, max_value: float = 1.0) -> float:
    if err < 1e-10:
        return PSNR_CAP
    return min(20.0 * math.log10(max_value) - 20.0 * math.log10(err), PSNR_CAP)


def psnr(pred, truth, scope=None, max_value: float = 1.0) -> float:
    return psnr_from_rmse(rmse(pred, truth, scope), max_value)


def ssim_map(pred, truth, window: int = SSIM_WINDOW, max_value: float = 1.0) -> np.ndarray:
    """Per-window SSIM with a uniform ``window x window`` kernel at stride 1 (population moments)."""
    a, b = _plane(pred), _plane(truth)
    if a.shape != b.shape:
        raise GeometryError(f"pred shape {a.shape} != truth shape {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim takes single-band images")
    if min(a.shape) < window:
        raise SizeError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, truth, scope=None, window: int = SSIM_WINDOW, max_value: float = 1.0) -> float:
    """Mean SSIM over windows; a mask scope keeps only windows touching a masked pixel."""
    m = ssim_map(pred, truth, window, max_value)
    if scope is None or (isinstance(scope, str) and scope == "full"):
        return float(m.mean())
    sel = np.asarray(getattr(scope, "data", scope), dtype=bool)
    touched = sliding_window_view(sel, (window, window)).any(axis=(-2, -1))
    if not touched.any():
        raise ContractError("scope selects no pixels")
    return float(m[touched].mean())


def perceptual_distance(pred, truth, ex=None) -> float:
    """Layer-weighted mean squared difference of unit-normalised tap features."""
    from satmaker.perceptual import extract_features, make_extractor

    ex = ex or make_extractor()
    with torch.no_grad():
        fa = extract_features(_plane(pred), ex)
        fb = extract_features(_plane(truth), ex)
        total, wsum = 0.0, 0.0
        for a, b, w in zip(fa.style, fb.style, ex.layer_weights):
            na = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            nb = b / (b.norm(dim=1, keepdim=True) + 1e-10)
            total += w * float(((na - nb) ** 2).sum(dim=1).mean())
            wsum += w
    return total / wsum


def brightness_stats(image, scope=None) -> tuple[float, float]:
    """Mean and population standard deviation of ``255 * v`` over the scope."""
    v, _ = _scoped(image, image, scope)
    v = 255.0 * v
    return float(v.mean()), float(v.std())


@dataclass
class MetricsReport:
    ssim: float
    psnr: float
    rmse: float
    mae: float
    perceptual: float
    scope: str
    n_pixels: int
    method: str = ""
    band: str = ""
    missing_ratio: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, truth, mask=None, scope: str = "masked", ex=None, **labels) -> MetricsReport:
    sel = None if scope == "full" else mask
    if scope != "full" and mask is None:
        raise ContractError("masked scope needs a mask")
    p, _ = _scoped(pred, truth, sel)
    err = rmse(pred, truth, sel)
    return MetricsReport(
        ssim=ssim(pred, truth, sel),
        psnr=psnr_from_rmse(err),
        rmse=err,
        mae=mae(pred, truth, sel),
        perceptual=perceptual_distance(pred, truth, ex),
        scope=scope,
        n_pixels=int(p.size),
        **labels,
    )
