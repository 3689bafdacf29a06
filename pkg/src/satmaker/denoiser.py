"""Noise-prediction network with a zero-initialised DEM side branch.

A three-level convolutional encoder-decoder with skip connections. The
timestep embedding (sinusoidal + MLP) and the prompt embedding (summed token
rows plus a fixed task vector) are added inside every block. The DEM passes
through its own small encoder whose per-level outputs enter the main
encoder through zero-initialised 1x1 projections, so conditioning is exactly
a no-op until training moves those projections.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from satmaker.errors import ConfigError, GeometryError
from satmaker.raster_io import Raster

BANDS = ("blue", "green", "red", "nir")


@dataclass(frozen=True)
class Arch:
    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2  # conv layers per block
    time_dim: int = 64
    emb_dim: int = 128
    groups: int = 8

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ConfigError("need at least one level")
        if self.blocks_per_level != 2:
            raise ConfigError("blocks hold exactly two conv layers")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass(frozen=True)
class PromptSpec:
    """``<satelliteMaker> Site, Band`` (task 1) or ``... Location, Date, Day, Band`` (task 2)."""

    task: int
    band: str
    site: str | None = None
    date: str | None = None
    day: int | None = None

    def __post_init__(self):
        if self.task not in (1, 2):
            raise ValueError(f"task must be 1 or 2, got {self.task}")
        if self.site is None:
            raise ValueError("prompt needs a site/location token")
        if self.task == 1 and (self.date is not None or self.day is not None):
            raise ValueError("task-1 prompts take (site, band) only")
        if self.task == 2 and (self.date is None or self.day is None):
            raise ValueError("task-2 prompts need (location, date, day, band)")

    def tokens(self) -> list[str]:
        if self.task == 1:
            return [f"site:{self.site}", f"band:{self.band}"]
        return [f"site:{self.site}", f"date:{self.date}", f"day:{self.day}", f"band:{self.band}"]

    def text(self) -> str:
        if self.task == 1:
            return f"<satelliteMaker> {self.site}, {self.band}"
        return f"<satelliteMaker> {self.site}, {self.date}, {self.day}, {self.band}"

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        return cls(**d)


def prompt_vocab(prompts) -> list[str]:
    """Sorted token list covering ``prompts`` plus all band tokens."""
    tokens = {f"band:{b}" for b in BANDS}
    for p in prompts:
        tokens.update(p.tokens())
    return sorted(tokens)


@dataclass
class ConditionInput:
    dem: Raster
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        d = self.dem.data[0].astype(np.float64)
        self.mean = float(d.mean())
        self.std = float(max(d.std(), 1e-6))

    @property
    def shape(self):
        return self.dem.shape

    def normalized(self) -> np.ndarray:
        return ((self.dem.data[0].astype(np.float64) - self.mean) / self.std).astype(np.float32)


def normalize_dem(dem: torch.Tensor) -> torch.Tensor:
    """Per-tile zero-mean unit-variance on a (B, 1, H, W) batch."""
    mean = dem.mean(dim=(-2, -1), keepdim=True)
    std = dem.std(dim=(-2, -1), keepdim=True, unbiased=False).clamp_min(1e-6)
    return (dem - mean) / std


class Projection(nn.Module):
    """Pointwise channel mixing ``y = W x + b`` with a plain 2-D weight ``W`` (out x in).

    An attached LoRA adapter adds ``scale * A (B x)`` without forming ``W + AB``.
    """

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.adapter = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.adapter is not None:
            from satmaker.lora import lora_forward

            y = lora_forward(self.weight, self.adapter, x)
        else:
            y = torch.einsum("oi,bi...->bo...", self.weight, x)
        if self.bias is not None:
            y = y + self.bias.view(1, -1, *([1] * (x.dim() - 2)))
        return y


def _groups(c: int, groups: int) -> int:
    g = min(groups, c)
    while c % g:
        g -= 1
    return g


class Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out, groups), c_out)
        self.emb = Projection(emb_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out, groups), c_out)
        self.proj = Projection(c_out, c_out)
        self.skip = Projection(c_in, c_out) if c_in != c_out else None

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return self.proj(h) + (x if self.skip is None else self.skip(x))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class Denoiser(nn.Module):
    """Predicts the noise in ``x_t`` given the step, an optional DEM and a prompt."""

    def __init__(self, arch: Arch, vocab: list[str]):
        super().__init__()
        if not vocab:
            raise ConfigError("vocab must not be empty")
        if len(set(vocab)) != len(vocab):
            raise ConfigError("vocab has duplicate tokens")
        self.arch = arch
        self.vocab = list(vocab)
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        w = arch.widths
        e = arch.emb_dim

        self.time_mlp1 = Projection(arch.time_dim, e)
        self.time_mlp2 = Projection(e, e)
        self.prompt_table = nn.Embedding(len(vocab), e)
        self.register_buffer("task_table", torch.zeros(2, e))

        self.stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.enc = nn.ModuleList()
        c = w[0]
        for width in w:
            self.enc.append(Block(c, width, e, arch.groups))
            c = width
        self.dec = nn.ModuleList()
        for k in range(len(w) - 2, -1, -1):
            self.dec.append(Block(c + w[k], w[k], e, arch.groups))
            c = w[k]
        self.out_norm = nn.GroupNorm(_groups(w[0], arch.groups), w[0])
        self.out_conv = nn.Conv2d(w[0], 1, 3, padding=1)

        # DEM side branch
        self.cond_stem = nn.Conv2d(1, w[0], 3, padding=1)
        self.cond_enc = nn.ModuleList()
        self.cond_zero = nn.ModuleList()
        c = w[0]
        for width in w:
            self.cond_enc.append(nn.Conv2d(c, width, 3, padding=1))
            self.cond_zero.append(Projection(width, width))
            c = width

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def token_ids(self, prompt: PromptSpec) -> list[int]:
        ids = []
        for tok in prompt.tokens():
            if tok not in self.token_index:
                raise KeyError(f"token {tok!r} not in vocab")
            ids.append(self.token_index[tok])
        return ids

    def prompt_embedding(self, prompts) -> torch.Tensor:
        rows = []
        for p in prompts:
            ids = torch.tensor(self.token_ids(p), dtype=torch.long)
            rows.append(self.prompt_table(ids).sum(dim=0) + self.task_table[p.task - 1])
        return torch.stack(rows)

    def _cond_features(self, dem: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        c = F.silu(self.cond_stem(dem))
        for k, conv in enumerate(self.cond_enc):
            if k > 0:
                c = F.avg_pool2d(c, 2)
            c = F.silu(conv(c))
            feats.append(self.cond_zero[k](c))
        return feats

    def forward(self, x: torch.Tensor, t, dem: torch.Tensor | None = None, prompts=None) -> torch.Tensor:
        b, _, h, w = x.shape
        levels = len(self.arch.widths)
        if h % 2 ** (levels - 1) or w % 2 ** (levels - 1):
            raise GeometryError(f"spatial size {h}x{w} not divisible by {2 ** (levels - 1)}")
        if dem is not None and dem.shape != x.shape:
            raise GeometryError(f"dem shape {tuple(dem.shape)} != x shape {tuple(x.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        if prompts is None or isinstance(prompts, PromptSpec):
            prompts = [prompts] * b
        if len(prompts) == 1 and b > 1:
            prompts = list(prompts) * b

        emb = self.time_mlp2(F.silu(self.time_mlp1(timestep_embedding(t, self.arch.time_dim).to(x.dtype))))
        if prompts[0] is not None:
            emb = emb + self.prompt_embedding(prompts)
        cond = self._cond_features(dem) if dem is not None else None

        hcur = self.stem(x)
        skips = []
        for k, block in enumerate(self.enc):
            if k > 0:
                hcur = F.avg_pool2d(hcur, 2)
            hcur = block(hcur, emb)
            if cond is not None:
                hcur = hcur + cond[k]
            skips.append(hcur)
        skips.pop()
        for block in self.dec:
            hcur = F.interpolate(hcur, scale_factor=2, mode="nearest")
            hcur = block(torch.cat([hcur, skips.pop()], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(hcur)))


def init_denoiser(arch: Arch | None = None, vocab: list[str] | None = None, seed: int = 0) -> Denoiser:
    """Seeded, variance-scaled initialisation; DEM-branch output projections start at zero."""
    arch = arch or Arch()
    if not vocab:
        raise ConfigError("vocab must not be empty")
    gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    with torch.no_grad():
        model = Denoiser(arch, vocab)
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            elif name == "prompt_table.weight":
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
        for proj in model.cond_zero:
            proj.weight.zero_()
            proj.bias.zero_()
        model.task_table.copy_(torch.randn(model.task_table.shape, generator=gen) * 0.1)
    return model


def denoise_predict(params: Denoiser, x_t, t: int, cond: ConditionInput | None, prompt: PromptSpec):
    """Single-image convenience wrapper returning ``eps_hat`` with the input's shape."""
    x = torch.as_tensor(getattr(x_t, "data", x_t), dtype=params.dtype)
    shape = x.shape
    while x.dim() < 4:
        x = x[None]
    dem = None
    if cond is not None:
        dem = torch.from_numpy(cond.normalized()).to(params.dtype)[None, None].expand_as(x)
    out = params(x, t, dem, [prompt] * x.shape[0])
    return out.reshape(shape)


def encode_prompt(prompt: PromptSpec, table: Denoiser) -> torch.Tensor:
    return table.prompt_embedding([prompt])[0]


def parameter_count(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
