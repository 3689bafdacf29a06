import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from satmaker import checkpoint as ckpt
from satmaker.denoiser import Arch, PromptSpec, init_denoiser, prompt_vocab
from satmaker.errors import ConfigError, GeometryError
from satmaker.lora import (
    LoRAAdapter,
    attach_lora,
    count_trainable,
    default_targets,
    lora_forward,
    merge_into,
    merge_lora,
)

PROMPT = PromptSpec(1, "nir", site="01")
TINY = Arch(widths=(8, 16, 32), groups=4, time_dim=16, emb_dim=32)


def _adapter(d, k, r, seed=0, scale=1.0, zero_b=False):
    g = torch.Generator().manual_seed(seed)
    A = torch.randn(d, r, generator=g, dtype=torch.float64)
    B = torch.zeros(r, k, dtype=torch.float64) if zero_b else torch.randn(r, k, generator=g, dtype=torch.float64)
    return LoRAAdapter("w", A, B, scale)


def test_hand_example():
    a = LoRAAdapter("w", torch.tensor([[1.0], [2.0]]), torch.tensor([[3.0, 4.0]]))
    assert torch.equal(a.delta(), torch.tensor([[3.0, 4.0], [6.0, 8.0]]))
    y = lora_forward(torch.zeros(2, 2), a, torch.tensor([1.0, 0.0]))
    assert y.tolist() == [3.0, 6.0]


def test_zero_b_is_base_path():
    a = _adapter(6, 8, 2, zero_b=True)
    W = torch.randn(6, 8, dtype=torch.float64)
    x = torch.randn(8, dtype=torch.float64)
    assert torch.equal(lora_forward(W, a, x), W @ x)


def test_merge_properties():
    a = _adapter(6, 8, 3, scale=0.5)
    W = torch.randn(6, 8, dtype=torch.float64)
    before = W.clone()
    merged = merge_lora(W, a)
    assert torch.equal(W, before)
    torch.testing.assert_close(merged - W, 0.5 * a.A.detach() @ a.B.detach(), rtol=0, atol=1e-15)
    a.scale = 0.0
    assert torch.equal(merge_lora(W, a), W)


def test_basis_probe_agreement():
    a = _adapter(10, 12, 4, seed=2, scale=1.7)
    W = torch.randn(10, 12, dtype=torch.float64)
    with torch.no_grad():
        low = torch.stack([lora_forward(W, a, e) for e in torch.eye(12, dtype=torch.float64)], dim=1)
    assert torch.linalg.norm(merge_lora(W, a) - low) < 1e-6


@given(d=st.integers(2, 48), k=st.integers(2, 48), r_frac=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_merged_and_low_rank_paths_agree(d, k, r_frac, seed):
    r = max(1, int(r_frac * (min(d, k) // 2)))
    a = _adapter(d, k, r, seed)
    g = torch.Generator().manual_seed(seed + 1)
    W = torch.randn(d, k, generator=g, dtype=torch.float64)
    x = torch.randn(3, k, generator=g, dtype=torch.float64)
    with torch.no_grad():
        low = lora_forward(W, a, x)
        merged = x @ merge_lora(W, a).T
    assert torch.linalg.norm(low - merged) <= 1e-6 * torch.linalg.norm(merged)


def test_shape_errors_and_rank_limit():
    a = _adapter(4, 4, 2)
    with pytest.raises(GeometryError):
        lora_forward(torch.zeros(4, 5), a, torch.zeros(5))
    with pytest.raises(GeometryError):
        merge_lora(torch.zeros(3, 4), a)
    with pytest.raises(ConfigError):
        _adapter(4, 4, 3)


def test_count_trainable():
    a = _adapter(64, 64, 4)
    assert count_trainable([a]) == 512
    assert count_trainable([]) == 0
    assert count_trainable([a]) / (64 * 64) == 0.125


def test_attach_is_identity_and_deterministic():
    model = init_denoiser(TINY, prompt_vocab([PROMPT]), 0)
    x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        base = model(x, 400, None, [PROMPT, PROMPT])
    adapters = attach_lora(model, 2, seed=5)
    assert set(adapters) == set(default_targets(model))
    with torch.no_grad():
        adapted = model(x, 400, None, [PROMPT, PROMPT])
    assert torch.equal(base, adapted)
    other = attach_lora(init_denoiser(TINY, prompt_vocab([PROMPT]), 0), 2, seed=5)
    assert all(torch.equal(adapters[t].A, other[t].A) for t in adapters)
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert trainable and all(".adapter." in n for n in trainable)


def test_attach_errors():
    model = init_denoiser(TINY, prompt_vocab([PROMPT]), 0)
    with pytest.raises(KeyError):
        attach_lora(model, 1, targets=["enc.0.nothing.weight"])
    with pytest.raises(KeyError):
        attach_lora(model, 1, targets=["stem.weight"])  # 4-D conv weight
    with pytest.raises(ConfigError):
        attach_lora(model, 5, targets=["enc.0.proj.weight"])  # 8x8 weight allows r <= 4


def test_merge_into_matches_adapted_forward(tmp_path):
    model = init_denoiser(TINY, prompt_vocab([PROMPT]), 0).double()
    adapters = attach_lora(model, 2, seed=1)
    with torch.no_grad():
        for a in adapters.values():
            a.B.normal_(0, 0.2)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        adapted = model(x, 50, None, [PROMPT])
    ckpt.save_adapters(adapters, tmp_path / "a.smk")
    merge_into(model, adapters)
    with torch.no_grad():
        merged = model(x, 50, None, [PROMPT])
    torch.testing.assert_close(adapted, merged, rtol=1e-10, atol=1e-12)
    fresh = init_denoiser(TINY, prompt_vocab([PROMPT]), 0)
    loaded = ckpt.load_adapters(tmp_path / "a.smk", fresh)
    assert set(loaded) == set(adapters)
    assert np.allclose(loaded["enc.0.proj.weight"].B.detach().numpy(),
                       adapters["enc.0.proj.weight"].B.detach().numpy(), atol=1e-7)
