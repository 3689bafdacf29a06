"""Low-rank adapters ``W' = W + scale * A B`` on 2-D projection weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from satmaker.errors import ConfigError, GeometryError

DEFAULT_RANK = 4


class LoRAAdapter(nn.Module):
    """Factor pair for a ``d x k`` base weight: ``A`` is ``d x r``, ``B`` is ``r x k``."""

    def __init__(self, target: str, A: torch.Tensor, B: torch.Tensor, scale: float = 1.0):
        super().__init__()
        d, r = A.shape
        r2, k = B.shape
        if r != r2:
            raise GeometryError(f"factor ranks disagree: A is {tuple(A.shape)}, B is {tuple(B.shape)}")
        if 2 * r > min(d, k):
            raise ConfigError(f"rank {r} too large for a {d}x{k} weight (need r <= {min(d, k) // 2})")
        self.target = target
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(B)
        self.scale = float(scale)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.A @ self.B)


def default_targets(model: nn.Module) -> list[str]:
    """Per-level block projections: the largest 2-D weights in the denoiser."""
    return [n for n, _ in model.named_parameters() if n.endswith("proj.weight") and n.startswith(("enc.", "dec."))]


def _owner(model: nn.Module, target: str):
    if not target.endswith(".weight"):
        raise KeyError(f"{target!r} does not name a weight")
    try:
        owner = model.get_submodule(target[: -len(".weight")])
    except AttributeError:
        raise KeyError(f"unknown target {target!r}") from None
    w = getattr(owner, "weight", None)
    if w is None or w.dim() != 2 or not hasattr(owner, "adapter"):
        raise KeyError(f"{target!r} is not a 2-D projection weight")
    return owner


def attach_lora(params: nn.Module, rank: int = DEFAULT_RANK, targets: list[str] | None = None,
                seed: int = 0, scale: float = 1.0) -> dict[str, LoRAAdapter]:
    """Attach fresh adapters (A random, B zero) to ``targets`` and freeze the base weights."""
    targets = default_targets(params) if targets is None else list(targets)
    owners = [_owner(params, t) for t in targets]
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    for t, owner in zip(targets, owners):
        d, k = owner.weight.shape
        if 2 * rank > min(d, k):
            raise ConfigError(f"rank {rank} too large for {t} ({d}x{k}); need r <= {min(d, k) // 2}")
    gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
    adapters = {}
    for t, owner in zip(targets, owners):
        d, k = owner.weight.shape
        dtype = owner.weight.dtype
        A = torch.randn(d, rank, generator=gen, dtype=torch.float64).to(dtype) / math.sqrt(d)
        B = torch.zeros(rank, k, dtype=dtype)
        adapter = LoRAAdapter(t, A, B, scale)
        owner.adapter = adapter
        adapters[t] = adapter
    for p in params.parameters():
        p.requires_grad_(False)
    for a in adapters.values():
        a.A.requires_grad_(True)
        a.B.requires_grad_(True)
    return adapters


def detach_lora(params: nn.Module) -> None:
    for m in params.modules():
        if getattr(m, "adapter", None) is not None:
            m.adapter = None
    for p in params.parameters():
        p.requires_grad_(True)


def _check(W: torch.Tensor, adapter: LoRAAdapter):
    if tuple(W.shape) != adapter.shape:
        raise GeometryError(f"base weight {tuple(W.shape)} does not match adapter {adapter.shape}")


def lora_forward(W: torch.Tensor, adapter: LoRAAdapter, x: torch.Tensor) -> torch.Tensor:
    """``(W + scale A B) x`` along dim 1 of ``x`` via the low-rank path, never forming ``W'``.

    ``x`` is a vector of length k, or a (batch, k, ...) tensor.
    """
    _check(W, adapter)
    if x.dim() == 1:
        if x.shape[0] != W.shape[1]:
            raise GeometryError(f"input length {x.shape[0]} != k={W.shape[1]}")
        return W @ x + adapter.scale * (adapter.A @ (adapter.B @ x))
    if x.shape[1] != W.shape[1]:
        raise GeometryError(f"input channels {x.shape[1]} != k={W.shape[1]}")
    base = torch.einsum("oi,bi...->bo...", W, x)
    low = torch.einsum("ri,bi...->br...", adapter.B, x)
    return base + adapter.scale * torch.einsum("or,br...->bo...", adapter.A, low)


def merge_lora(W: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    _check(W, adapter)
    return W.detach().clone() + adapter.delta().detach()


def merge_into(params: nn.Module, adapters: dict[str, LoRAAdapter]) -> None:
    """Fold every adapter into its base weight in place and detach it."""
    with torch.no_grad():
        for t, a in adapters.items():
            owner = _owner(params, t)
            owner.weight.copy_(merge_lora(owner.weight, a))
            owner.adapter = None


def count_trainable(adapters) -> int:
    items = adapters.values() if isinstance(adapters, dict) else adapters
    return sum(a.rank * (a.shape[0] + a.shape[1]) for a in items)
