import numpy as np
import pytest
import torch

from satmaker.denoiser import (
    Arch,
    ConditionInput,
    PromptSpec,
    denoise_predict,
    encode_prompt,
    init_denoiser,
    parameter_count,
    prompt_vocab,
)
from satmaker.errors import ConfigError, GeometryError
from satmaker.scene_synth import SceneConfig, synth_dem

PROMPTS = [PromptSpec(1, b, site="01") for b in ("blue", "green", "red", "nir")]
VOCAB = prompt_vocab(PROMPTS)
TINY = Arch(widths=(8, 16, 32), groups=4, time_dim=16, emb_dim=32)


def _expected_count(arch: Arch, n_vocab: int) -> int:
    """Closed-form parameter count of the declared architecture, layer by layer."""
    e, w = arch.emb_dim, arch.widths

    def conv(ci, co):
        return ci * co * 9 + co

    def proj(ci, co):
        return ci * co + co

    def block(ci, co):
        n = conv(ci, co) + 2 * co + proj(e, co) + conv(co, co) + 2 * co + proj(co, co)
        return n + (proj(ci, co) if ci != co else 0)

    total = proj(arch.time_dim, e) + proj(e, e) + n_vocab * e
    total += conv(1, w[0])
    c = w[0]
    for width in w:
        total += block(c, width)
        c = width
    for k in range(len(w) - 2, -1, -1):
        total += block(c + w[k], w[k])
        c = w[k]
    total += 2 * w[0] + conv(w[0], 1)
    total += conv(1, w[0])
    c = w[0]
    for width in w:
        total += conv(c, width) + proj(width, width)
        c = width
    return total


def test_parameter_count_closed_form():
    model = init_denoiser(Arch(), VOCAB, 0)
    assert parameter_count(model) == _expected_count(Arch(), len(VOCAB))
    # pinned for the default arch with a five-token vocabulary
    assert len(VOCAB) == 5
    assert parameter_count(model) == 725_057


def test_init_deterministic_and_validated():
    a = init_denoiser(TINY, VOCAB, 3).state_dict()
    b = init_denoiser(TINY, VOCAB, 3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = init_denoiser(TINY, VOCAB, 4).state_dict()
    assert not torch.equal(a["stem.weight"], c["stem.weight"])
    with pytest.raises(ConfigError):
        init_denoiser(TINY, [], 0)


def test_condition_branch_is_identity_at_init():
    model = init_denoiser(TINY, VOCAB, 0)
    cond = ConditionInput(synth_dem(SceneConfig(size=16, seed=8)))
    x = torch.randn(16, 16, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a = denoise_predict(model, x, 500, cond, PROMPTS[3])
        b = denoise_predict(model, x, 500, None, PROMPTS[3])
    assert a.shape == x.shape
    assert torch.equal(a, b)


@pytest.mark.parametrize("widths,size", [((8, 16), 6), ((8, 16, 32), 8), ((4, 8, 8, 16), 16)])
def test_output_shape(widths, size):
    model = init_denoiser(Arch(widths=widths, groups=4, time_dim=8, emb_dim=16), VOCAB, 0)
    x = torch.randn(3, 1, size, size)
    assert model(x, torch.tensor([0, 10, 999]), None, PROMPTS[:3]).shape == x.shape


def test_size_and_token_errors():
    model = init_denoiser(TINY, VOCAB, 0)
    with pytest.raises(GeometryError):
        model(torch.zeros(1, 1, 6, 6), 0, None, PROMPTS[:1])
    with pytest.raises(KeyError):
        model(torch.zeros(1, 1, 8, 8), 0, None, [PromptSpec(1, "nir", site="99")])


def test_prompt_validation_and_embeddings():
    with pytest.raises(ValueError):
        PromptSpec(1, "nir", site="01", date="2021-01")
    with pytest.raises(ValueError):
        PromptSpec(2, "nir", site="01")
    p2 = PromptSpec(2, "red", site="03", date="2021-02", day=1)
    assert p2.text() == "<satelliteMaker> 03, 2021-02, 1, red"
    assert PROMPTS[0].text() == "<satelliteMaker> 01, blue"
    model = init_denoiser(TINY, VOCAB, 0)
    red, nir = encode_prompt(PROMPTS[2], model), encode_prompt(PROMPTS[3], model)
    assert torch.equal(red, encode_prompt(PromptSpec(1, "red", site="01"), model))
    assert not torch.equal(red, nir)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = init_denoiser(TINY, VOCAB, 1).double()
    with torch.no_grad():
        for p in model.cond_zero.parameters():
            p.normal_(0, 0.1)  # give the condition branch a live gradient path
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    dem = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    t = torch.tensor([321])

    def f():
        return model(x, t, dem, PROMPTS[1:2]).mean()

    model.zero_grad()
    f().backward()
    probes = [("stem.weight", (0, 0, 1, 1)), ("enc.1.proj.weight", (2, 3)), ("dec.0.conv1.weight", (1, 2, 0, 2)),
              ("cond_enc.0.weight", (0, 1, 1, 0)), ("time_mlp1.weight", (4, 5)), ("out_conv.weight", (0, 3, 2, 1)),
              ("prompt_table.weight", (VOCAB.index("band:green"), 7))]
    params = dict(model.named_parameters())
    h = 1e-6
    for name, idx in probes:
        p = params[name]
        analytic = p.grad[idx].item()
        with torch.no_grad():
            p[idx] += h
            up = f().item()
            p[idx] -= 2 * h
            down = f().item()
            p[idx] += h
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-6), name


def test_band_token_changes_output_after_training():
    from satmaker.training import Sample, TrainConfig, make_batch, train_step

    model = init_denoiser(TINY, VOCAB, 0)
    rng = np.random.default_rng(0)
    samples = [Sample(f"s{i}", rng.random((8, 8)).astype(np.float32), rng.random((8, 8)).astype(np.float32), p)
               for i, p in enumerate(PROMPTS)]
    train_step(model, make_batch(samples), TrainConfig(lr=1e-2, arch=TINY))
    x = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        red = model(x, 100, None, [PROMPTS[2]])
        nir = model(x, 100, None, [PROMPTS[3]])
    assert (red - nir).abs().max() > 0
