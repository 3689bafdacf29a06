import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from satmaker.errors import ContractError, GeometryError, SizeError
from satmaker.metrics import (
    PSNR_CAP,
    brightness_stats,
    evaluate,
    mae,
    perceptual_distance,
    psnr,
    rmse,
    ssim,
    ssim_map,
)
from satmaker.perceptual import make_extractor

EX = make_extractor()
unit = arrays(np.float64, (12, 12), elements=st.floats(0, 1))


def test_error_examples(rng):
    t = rng.random((8, 8))
    assert rmse(t, t) == 0 and mae(t, t) == 0
    assert rmse(t + 0.1, t) == pytest.approx(0.1, rel=1e-12)
    assert mae(t + 0.1, t) == pytest.approx(0.1, rel=1e-12)
    assert rmse(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])) == 1.0
    assert mae(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])) == 1.0


def test_psnr_examples(rng):
    t = rng.random((8, 8))
    assert psnr(t, t) == PSNR_CAP == 99.0
    assert psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-9)


@given(unit, unit)
def test_metric_identities(a, b):
    r, m = rmse(a, b), mae(a, b)
    assert r >= m - 1e-15 >= -1e-15
    if r > 1e-10:
        assert psnr(a, b) == pytest.approx(min(-20 * math.log10(r), 99.0), abs=1e-9)
    s = ssim(a, b)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


@given(unit)
def test_ssim_identity(a):
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_closed_form():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.7)
    c1, c2 = 0.01**2, 0.03**2
    expected = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1) * (c2 / c2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)
    assert ssim(a, b) < 1
    with pytest.raises(SizeError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))
    assert ssim_map(a, b).shape == (9, 9)


def test_scope_restriction(rng):
    a, b = rng.random((10, 10)), rng.random((10, 10))
    m = rng.random((10, 10)) < 0.3
    assert rmse(a, b, m) == pytest.approx(np.sqrt(np.mean((a[m] - b[m]) ** 2)), rel=1e-12)
    assert mae(a, b, m) == pytest.approx(np.mean(np.abs(a[m] - b[m])), rel=1e-12)
    with pytest.raises(ContractError):
        rmse(a, b, np.zeros((10, 10), bool))
    with pytest.raises(ContractError):
        brightness_stats(a, np.zeros((10, 10), bool))
    with pytest.raises(GeometryError):
        rmse(a, b[:5])


def test_perceptual_distance(rng):
    a = rng.random((32, 32)) * 0.5 + 0.25
    b = rng.random((32, 32))
    assert perceptual_distance(a, a, EX) == 0.0
    assert perceptual_distance(a, b, EX) == pytest.approx(perceptual_distance(b, a, EX), rel=1e-12)
    assert perceptual_distance(a, b, EX) > 0
    noise = rng.normal(size=a.shape)
    d = [perceptual_distance(a + s * noise, a, EX) for s in (0.01, 0.05, 0.1)]
    assert 0 < d[0] < d[1] < d[2]


def test_brightness_stats():
    assert brightness_stats(np.full((4, 4), 0.5)) == (127.5, 0.0)
    assert brightness_stats(np.array([[0.0, 1.0]])) == (127.5, 127.5)
    img = np.random.default_rng(0).random((6, 6)) * 0.8
    mu0, _ = brightness_stats(img)
    mu1, _ = brightness_stats(img + 0.1)
    assert mu1 - mu0 == pytest.approx(25.5, abs=1e-9)


def test_evaluate_report(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    m = rng.random((16, 16)) < 0.4
    rep = evaluate(a, b, m, ex=EX, method="nearest", band="nir", missing_ratio=0.4)
    assert rep.n_pixels == int(m.sum())
    assert rep.rmse == rmse(a, b, m) and rep.psnr == psnr(a, b, m)
    full = evaluate(a, b, scope="full", ex=EX)
    assert full.n_pixels == 256 and full.ssim == ssim(a, b)
    with pytest.raises(ContractError):
        evaluate(a, b, None, scope="masked")
