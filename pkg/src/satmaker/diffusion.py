"""Noise schedule, closed-form forward diffusion, DDIM sampling and inpainting.

Samplers operate on a centred representation ``2 * v - 1`` of unit-interval
rasters; conversion happens at the raster boundary only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from satmaker.errors import ConfigError, GeometryError
from satmaker.raster_io import Raster

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    @property
    def T(self) -> int:
        return len(self.beta)

    def describe(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": "linear"}

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.alpha_bar.astype("<f8").tobytes()).hexdigest()[:16]


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), beta_start, beta_end)


def _values(x):
    return x.data if isinstance(x, Raster) else x


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """``sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`` for arrays or tensors."""
    x0, eps = _values(x0), _values(eps)
    if tuple(x0.shape) != tuple(eps.shape):
        raise GeometryError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if not 0 <= t < sched.T:
        raise ConfigError(f"step {t} outside [0, {sched.T})")
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_step(x_prev, t: int, eps, sched: NoiseSchedule):
    """One Markov transition ``q(x_t | x_{t-1})``."""
    b = float(sched.beta[t])
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 1.0
    strength: float = 0.9
    guidance_scale: float = 1.0
    seed: int = 0
    # ControlNet preprocessing knob; kept for provenance, unused in pixel space
    detect_resolution: int = 384

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must lie in [0, 1], got {self.strength}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale != 1.0:
            raise ConfigError("only guidance_scale=1.0 (plain conditional prediction) is supported")


def to_model_space(v):
    return 2.0 * v - 1.0


def from_model_space(x):
    return (x + 1.0) / 2.0


def start_step(strength: float, T: int) -> int:
    return min(int(math.floor(strength * T + 0.5)), T - 1)


def ddim_timesteps(steps: int, t_start: int) -> list[int]:
    """``steps`` timesteps spread uniformly over ``[0, t_start]``, descending."""
    ts = np.unique(np.floor(np.linspace(0, t_start, steps) + 0.5).astype(int))
    return [int(t) for t in ts[::-1]]


def _randn(shape, gen: torch.Generator, like: torch.Tensor) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=like.dtype, device=like.device)


@dataclass
class ChainRequest:
    """Batched sampler input in model space. ``known``/``mask`` enable inpainting."""

    x_start: torch.Tensor
    timesteps: list[int]
    dem: torch.Tensor | None = None
    prompts: list = field(default_factory=list)
    known: torch.Tensor | None = None
    mask: torch.Tensor | None = None  # True where missing


def run_chain(denoiser, req: ChainRequest, sched: NoiseSchedule, eta: float,
              gen: torch.Generator, replace_gen: torch.Generator | None = None,
              grad: bool = False) -> torch.Tensor:
    """DDIM updates from ``req.timesteps[0]`` down to a clean estimate.

    The final transition targets ``alpha_bar = 1``, i.e. returns the
    predicted ``x0``. When ``req.mask`` is set, unmasked pixels are replaced
    after every step by the forward-diffused known image, and copied
    verbatim at the end.
    """
    x = req.x_start
    ts = req.timesteps
    ab = sched.alpha_bar
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            a_t = float(ab[t])
            a_prev = float(ab[t_prev]) if t_prev >= 0 else 1.0
            t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
            eps_hat = denoiser(x, t_batch, req.dem, req.prompts)
            x0_hat = (x - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
            sigma = eta * math.sqrt(max((1.0 - a_prev) / (1.0 - a_t), 0.0)) * math.sqrt(
                max(1.0 - a_t / a_prev, 0.0)
            )
            direction = math.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0)) * eps_hat
            x = math.sqrt(a_prev) * x0_hat + direction
            if sigma > 0:
                x = x + sigma * _randn(x.shape, gen, x)
            if req.mask is not None:
                if t_prev >= 0:
                    noise = _randn(x.shape, replace_gen or gen, x)
                    known_t = forward_diffuse(req.known, t_prev, noise, sched)
                else:
                    known_t = req.known
                x = torch.where(req.mask, x, known_t)
    return x


def _as_batch(r: Raster) -> torch.Tensor:
    if len(r.bands) != 1:
        raise ValueError("samplers model one band at a time")
    return torch.from_numpy(r.data.copy())[None].to(torch.float32)


def _generators(seed: int):
    g = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    g_rep = torch.Generator().manual_seed((int(seed) + 0x5EED) & (2**63 - 1))
    return g, g_rep


def _dem_tensor(cond, shape) -> torch.Tensor | None:
    if cond is None:
        return None
    dem = cond.normalized()
    if dem.shape != tuple(shape[-2:]):
        raise GeometryError(f"dem shape {dem.shape} != target shape {tuple(shape[-2:])}")
    return torch.from_numpy(dem)[None, None].to(torch.float32)


def ddim_sample(denoiser, cond, prompt, cfg: SamplerConfig, sched: NoiseSchedule,
                init: Raster | None = None, shape: tuple[int, int] | None = None,
                band: str | None = None) -> Raster:
    """Draw one conditional sample; with ``init`` start part-way along the chain."""
    if cfg.steps > sched.T:
        raise ConfigError(f"steps {cfg.steps} exceed chain length {sched.T}")
    g, _ = _generators(cfg.seed)
    if init is not None:
        if cfg.strength == 0.0:
            return init.replace(init.data.copy())
        t_start = start_step(cfg.strength, sched.T)
        x0 = to_model_space(_as_batch(init))
        x_start = forward_diffuse(x0, t_start, _randn(x0.shape, g, x0), sched)
        shape = init.shape
        band = band or init.bands[0]
    else:
        if shape is None:
            raise ValueError("shape is required without an init raster")
        t_start = sched.T - 1
        x_start = torch.randn((1, 1) + tuple(shape), generator=g)
    req = ChainRequest(x_start, ddim_timesteps(cfg.steps, t_start),
                       _dem_tensor(cond, (1, 1) + tuple(shape)), [prompt])
    out = run_chain(denoiser, req, sched, cfg.eta, g)
    v = from_model_space(out[0, 0]).clamp(0.0, 1.0).numpy()
    return Raster([band or getattr(prompt, "band", "band")], v[None])


def inpaint_batch(denoiser, observed: torch.Tensor, mask: torch.Tensor, dem: torch.Tensor | None,
                  prompts: list, cfg: SamplerConfig, sched: NoiseSchedule) -> torch.Tensor:
    """Batched inpainting on unit-interval tensors of shape (B, 1, H, W)."""
    if cfg.steps > sched.T:
        raise ConfigError(f"steps {cfg.steps} exceed chain length {sched.T}")
    if observed.shape != mask.shape:
        raise GeometryError(f"mask shape {tuple(mask.shape)} != observed shape {tuple(observed.shape)}")
    if dem is not None and dem.shape != observed.shape:
        raise GeometryError(f"dem shape {tuple(dem.shape)} != observed shape {tuple(observed.shape)}")
    if cfg.strength == 0.0 or not bool(mask.any()):
        return observed.clone()
    g, g_rep = _generators(cfg.seed)
    known = to_model_space(observed)
    t_start = start_step(cfg.strength, sched.T)
    x_start = forward_diffuse(known, t_start, _randn(known.shape, g, known), sched)
    req = ChainRequest(x_start, ddim_timesteps(cfg.steps, t_start), dem, prompts, known, mask)
    out = run_chain(denoiser, req, sched, cfg.eta, g, replace_gen=g_rep)
    v = from_model_space(out).clamp(0.0, 1.0)
    # the final replacement is verbatim; re-impose it in unit space so round trips through
    # the centred representation cannot perturb known samples
    return torch.where(mask, v, observed)


def inpaint(denoiser, observed: Raster, mask, cond, prompt, cfg: SamplerConfig,
            sched: NoiseSchedule) -> Raster:
    mask_arr = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if mask_arr.shape != observed.shape:
        raise GeometryError(f"mask shape {mask_arr.shape} != observed shape {observed.shape}")
    obs = _as_batch(observed)
    m = torch.from_numpy(mask_arr)[None, None]
    out = inpaint_batch(denoiser, obs, m, _dem_tensor(cond, obs.shape), [prompt], cfg, sched)
    return observed.replace(out[0].numpy())
