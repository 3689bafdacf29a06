"""Fixed feature extractor, Gram/style loss, kernel MMD, and the inference-time adapter.

The extractor mirrors the VGG tap topology (conv1_1 .. conv5_1 for style,
conv4_2 for content) but uses frozen, seeded random weights without biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from satmaker.errors import ContractError, GeometryError, MissingReferenceError, SizeError
from satmaker.raster_io import Raster

STYLE_TAPS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
CONTENT_TAP = "conv4_2"
LAYER_WEIGHTS = (1.0, 0.8, 0.5, 0.3, 0.1)
LAMBDA_STYLE = 100.0
# objective level below which the two regions count as matched; scattered-pixel
# masks land around 1e-3 because both regions then cover the same tap positions
ADAPT_TOL = 1e-2


class FeatureExtractor(nn.Module):
    """Five conv stages separated by 2x average pooling; ReLU after every conv."""

    def __init__(self, channels=(16, 32, 64, 128, 128), seed: int = 0,
                 layer_weights=LAYER_WEIGHTS, dtype=torch.float64):
        super().__init__()
        if len(channels) != 5 or any(b < a for a, b in zip(channels, channels[1:])):
            raise ValueError("need 5 non-decreasing stage widths")
        self.channels = tuple(channels)
        self.layer_weights = tuple(float(w) for w in layer_weights)
        self.seed = seed
        gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
        convs = {}
        c_in = 1
        # (name, out channels) in forward order
        plan = []
        for s, c in enumerate(self.channels, start=1):
            plan.append((f"conv{s}_1", c))
            if s < 5:
                plan.append((f"conv{s}_2", c))
        for name, c in plan:
            w = torch.randn(c, c_in, 3, 3, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / (9 * c_in))
            convs[name] = nn.Parameter(w.to(dtype), requires_grad=False)
            c_in = c
        self.weights = nn.ParameterDict(convs)
        self.plan = [n for n, _ in plan]

    @property
    def min_size(self) -> int:
        return 2 ** (len(STYLE_TAPS) - 1)

    def tap_shapes(self, h: int, w: int) -> dict:
        out = {}
        for s, tap in enumerate(STYLE_TAPS):
            out[tap] = (self.channels[s], h >> s, w >> s)
        out[CONTENT_TAP] = (self.channels[3], h >> 3, w >> 3)
        return out

    def forward(self, x: torch.Tensor) -> dict:
        h, w = x.shape[-2:]
        if h < self.min_size or w < self.min_size:
            raise SizeError(f"image {h}x{w} smaller than the extractor's total stride {self.min_size}")
        taps = {}
        for name in self.plan:
            if name.endswith("_1") and name != "conv1_1":
                x = F.avg_pool2d(x, 2)
            x = F.relu(F.conv2d(x, self.weights[name].to(x.dtype), padding=1))
            if name in STYLE_TAPS or name == CONTENT_TAP:
                taps[name] = x
        return taps


def make_extractor(seed: int = 0, **kw) -> FeatureExtractor:
    return FeatureExtractor(seed=seed, **kw)


@dataclass
class FeatureStack:
    """Style taps (tap 1 at full resolution, each next one halved) plus the content tap.

    Every map carries a leading batch dimension: (B, C_l, H_l, W_l).
    """

    style: list
    content: torch.Tensor
    layer_weights: tuple = LAYER_WEIGHTS

    @property
    def shapes(self):
        return [tuple(f.shape[1:]) for f in self.style]


def as_image_batch(image, dtype=torch.float64) -> torch.Tensor:
    if isinstance(image, Raster):
        if len(image.bands) != 1:
            raise ValueError("feature extraction takes a single band")
        image = image.data
    x = torch.as_tensor(image, dtype=dtype) if not torch.is_tensor(image) else image
    while x.dim() < 4:
        x = x[None]
    return x


def extract_features(image, ex: FeatureExtractor) -> FeatureStack:
    x = as_image_batch(image)
    taps = ex(x)
    return FeatureStack([taps[t] for t in STYLE_TAPS], taps[CONTENT_TAP], ex.layer_weights)


def gram(F_l: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """``G = F F^T`` over flattened positions; batched over a leading dim when 4-D.

    With per-position ``weights`` the sum is re-weighted and rescaled to the
    full position count so it stays comparable with an unweighted Gram.
    """
    F_l = torch.as_tensor(F_l)
    flat = F_l.flatten(-2)  # (..., C, N)
    if weights is None:
        return flat @ flat.transpose(-1, -2)
    w = weights.flatten(-2)
    n = flat.shape[-1]
    total = w.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    return (flat * w.unsqueeze(-2)) @ flat.transpose(-1, -2) * (n / total).unsqueeze(-1)


def _style_term(g_gen, g_ref, c, n):
    return ((g_gen - g_ref) ** 2).sum(dim=(-2, -1)) / (4.0 * c * c * n * n)


def style_loss(gen: FeatureStack, ref: FeatureStack, weights=LAYER_WEIGHTS,
               gen_weights=None, ref_weights=None) -> torch.Tensor:
    """Layer-weighted sum of ``||G_gen - G_ref||_F^2 / (4 C^2 H^2 W^2)``, averaged over the batch.

    Pass ``weights=None`` for the unweighted sum.
    """
    if gen.shapes != ref.shapes:
        raise GeometryError(f"tap shapes differ: {gen.shapes} vs {ref.shapes}")
    weights = (1.0,) * len(gen.style) if weights is None else weights
    total = 0.0
    for l, (fg, fr, w) in enumerate(zip(gen.style, ref.style, weights)):
        c, h, wd = fg.shape[-3:]
        gg = gram(fg, None if gen_weights is None else gen_weights[l])
        gr = gram(fr, None if ref_weights is None else ref_weights[l])
        total = total + w * _style_term(gg, gr, c, h * wd).mean()
    return total


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "gaussian"
    sigma: float | str = "median-heuristic"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if self.sigma != "median-heuristic" and not float(self.sigma) > 0:
            raise ValueError("sigma must be positive")


def sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d2 = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return d2.clamp_min(0.0)


def resolve_sigma(k: KernelConfig, ref_samples: torch.Tensor) -> float:
    if k.sigma != "median-heuristic":
        return float(k.sigma)
    with torch.no_grad():
        ref = ref_samples.detach().to(torch.float64)
        if ref.shape[0] > 512:
            idx = torch.linspace(0, ref.shape[0] - 1, 512).round().long()
            ref = ref[idx]
        d = sq_dists(ref, ref).sqrt()
        iu = torch.triu_indices(ref.shape[0], ref.shape[0], offset=1)
        vals = d[iu[0], iu[1]]
        med = float(vals.median()) if vals.numel() else 0.0
    return med if med > 1e-12 else 1.0


def _weighted_mean(K: torch.Tensor, wa, wb) -> torch.Tensor:
    if wa is None and wb is None:
        return K.mean()
    wa = torch.full((K.shape[0],), 1.0 / K.shape[0], dtype=K.dtype) if wa is None else wa / wa.sum()
    wb = torch.full((K.shape[1],), 1.0 / K.shape[1], dtype=K.dtype) if wb is None else wb / wb.sum()
    return wa @ K @ wb


def mmd(xs, ys, k: KernelConfig = KernelConfig(), x_weights=None, y_weights=None, sigma=None):
    """Biased squared MMD ``mean k(x,x') + mean k(y,y') - 2 mean k(x,y)``, clamped at zero.

    Gaussian kernel ``exp(-||u - v||^2 / (2 sigma^2)``; with the median
    heuristic sigma is taken from ``ys`` (the reference set). Optional
    non-negative sample weights turn the means into weighted means.
    Returns a float for numpy input, a 0-d tensor otherwise.
    """
    as_numpy = not torch.is_tensor(xs)
    xs = torch.from_numpy(np.array(xs, dtype=np.float64)) if as_numpy else xs
    ys = torch.from_numpy(np.array(ys, dtype=np.float64)) if not torch.is_tensor(ys) else ys
    if xs.dim() != 2 or ys.dim() != 2 or xs.shape[1] != ys.shape[1]:
        raise GeometryError(f"sample sets must be (n, d) with equal d: {tuple(xs.shape)} vs {tuple(ys.shape)}")
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise ContractError("sample sets must be non-empty")
    s = sigma if sigma is not None else resolve_sigma(k, ys)
    gamma = 1.0 / (2.0 * s * s)
    kxx = _weighted_mean(torch.exp(-gamma * sq_dists(xs, xs)), x_weights, x_weights)
    kyy = _weighted_mean(torch.exp(-gamma * sq_dists(ys, ys)), y_weights, y_weights)
    kxy = _weighted_mean(torch.exp(-gamma * sq_dists(xs, ys)), x_weights, y_weights)
    val = (kxx + kyy - 2.0 * kxy).clamp_min(0.0)
    return float(val) if as_numpy else val


def positions(F_l: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) feature map to (B*H*W, C) samples, one per spatial position."""
    return F_l.permute(0, 2, 3, 1).reshape(-1, F_l.shape[1])


def distribution_loss(gen, ref, ex: FeatureExtractor, k: KernelConfig = KernelConfig()) -> torch.Tensor:
    """MMD between content-tap position vectors of two images (or batches)."""
    fg = extract_features(gen, ex).content
    fr = extract_features(ref, ex).content
    return mmd(positions(fg), positions(fr), k)


def total_loss(recon, dis, style, lambda_style: float = LAMBDA_STYLE):
    for name, v in (("recon", recon), ("dis", dis), ("style", style)):
        fv = float(v)
        if not math.isfinite(fv) or fv < 0:
            raise ContractError(f"{name} component must be finite and non-negative, got {fv}")
    return recon + dis + lambda_style * style


def _region_weights(mask: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Fraction of masked pixels under every tap position, for each of the style taps."""
    m = mask.to(torch.float64)
    out = [m]
    for _ in range(levels - 1):
        m = F.avg_pool2d(m, 2)
        out.append(m)
    return out


def adaptation_objective(image: torch.Tensor, mask: torch.Tensor, ex: FeatureExtractor,
                         k: KernelConfig, lambda_style: float, sigma: float | None = None,
                         weights=LAYER_WEIGHTS):
    """Distribution + weighted style mismatch between the masked and observed regions of ``image``.

    Tap positions are soft-assigned to the two regions by the fraction of
    masked pixels they cover, so the same expression serves contiguous and
    scattered masks.
    """
    stack = extract_features(image, ex)
    w_gen = _region_weights(mask, len(stack.style))
    w_ref = [1.0 - w for w in w_gen]
    style = style_loss(stack, stack, weights, gen_weights=[w[:, 0] for w in w_gen],
                       ref_weights=[w[:, 0] for w in w_ref])
    wc = w_gen[3].flatten()  # conv4_2 shares the conv4_1 grid
    samples = positions(stack.content)
    dis = mmd(samples, samples, k, x_weights=wc, y_weights=1.0 - wc, sigma=sigma)
    return dis + lambda_style * style, dis, style


def adapt(generated: Raster, reference: Raster, mask, steps: int = 50, step_size: float = 0.01,
          ex: FeatureExtractor | None = None, k: KernelConfig = KernelConfig(),
          lambda_style: float = LAMBDA_STYLE, max_halvings: int = 8, tol: float = ADAPT_TOL,
          return_history: bool = False):
    """Pixel-space descent on the masked pixels of ``generated``.

    Each step moves masked pixels along the normalised negative gradient by
    at most ``step_size``; the step is halved until the objective decreases,
    and the loop stops early when no halving helps or once the objective
    falls to ``tol``. Unmasked pixels are returned untouched.
    """
    mask_arr = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if generated.shape != reference.shape or mask_arr.shape != generated.shape:
        raise GeometryError("generated, reference and mask shapes must agree")
    if len(generated.bands) != 1:
        raise ValueError("adapt works on single-band rasters")
    if mask_arr.all():
        raise MissingReferenceError("mask leaves no observed pixels to adapt towards")
    history = []
    if steps <= 0 or not mask_arr.any():
        out = generated.replace(generated.data.copy())
        return (out, history) if return_history else out
    ex = ex or make_extractor()
    m = torch.from_numpy(mask_arr)[None, None]
    ref = torch.from_numpy(reference.data.astype(np.float64))[None]
    z = torch.from_numpy(generated.data.astype(np.float64))[None]

    def composite(v):
        return torch.where(m, v, ref)

    with torch.no_grad():
        init_stack = extract_features(composite(z), ex)
        w_ref = 1.0 - _region_weights(m, 4)[3].flatten()
        sigma = resolve_sigma(k, positions(init_stack.content)[w_ref > 0.5]
                              if (w_ref > 0.5).any() else positions(init_stack.content))

    def objective(v):
        return adaptation_objective(composite(v), m, ex, k, lambda_style, sigma)[0]

    with torch.no_grad():
        current = float(objective(z))
    history.append(current)
    for _ in range(steps):
        if current <= tol:
            break
        v = z.clone().requires_grad_(True)
        obj = objective(v)
        (g,) = torch.autograd.grad(obj, v)
        g = torch.where(m, g, torch.zeros_like(g))
        gmax = float(g.abs().max())
        if gmax == 0.0 or not math.isfinite(gmax):
            break
        direction = -g / gmax
        alpha = step_size
        accepted = False
        for _ in range(max_halvings + 1):
            trial = torch.where(m, (z + alpha * direction).clamp(0.0, 1.0), z)
            with torch.no_grad():
                val = float(objective(trial))
            if val < current:
                z, current, accepted = trial, val, True
                break
            alpha *= 0.5
        history.append(current)
        if not accepted:
            break
    out_data = np.where(mask_arr[None], z[0].numpy().astype(np.float32), generated.data)
    out = generated.replace(out_data)
    return (out, history) if return_history else out
