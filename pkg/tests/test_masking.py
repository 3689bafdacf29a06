import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satmaker.errors import GeometryError
from satmaker.masking import (
    Mask,
    apply_mask,
    load_mask,
    quality_filter,
    random_mask,
    save_mask,
)
from satmaker.raster_io import Raster


def _raster(h=10, w=10, bands=("a",)):
    return Raster(list(bands), np.full((len(bands), h, w), 0.2, np.float32))


def _qa(n_bad, h=10, w=10):
    d = np.zeros(h * w, bool)
    d[:n_bad] = True
    return Mask(d.reshape(h, w))


def test_quality_filter_boundary():
    r = _raster()
    assert quality_filter(r, _qa(0), 0.0)
    assert not quality_filter(r, _qa(6), 0.05)
    assert quality_filter(r, _qa(5), 0.05)
    with pytest.raises(GeometryError):
        quality_filter(r, _qa(0, 5, 5))


def test_random_mask_counts_and_determinism():
    assert not random_mask((10, 10), 0.0, 1).data.any()
    m = random_mask((10, 10), 0.5, 7)
    assert m.data.sum() == 50 and m.ratio == 0.5
    assert np.array_equal(m.data, random_mask((10, 10), 0.5, 7).data)
    assert not np.array_equal(m.data, random_mask((10, 10), 0.5, 8).data)
    with pytest.raises(ValueError):
        random_mask((4, 4), 0.96, 0)


@given(h=st.integers(1, 20), w=st.integers(1, 20), ratio=st.floats(0, 0.95), seed=st.integers(0, 2**40),
       valid_seed=st.integers(0, 100))
def test_exact_count_within_valid(h, w, ratio, seed, valid_seed):
    valid = np.random.default_rng(valid_seed).random((h, w)) < 0.7
    m = random_mask((h, w), ratio, seed, valid)
    assert m.data.sum() == int(np.floor(ratio * valid.sum() + 0.5))
    assert not (m.data & ~valid).any()
    if valid.sum():
        assert m.ratio == m.data.sum() / valid.sum()


def test_apply_mask():
    r = Raster(["a", "b", "c"], np.random.default_rng(0).random((3, 6, 6), dtype=np.float32))
    assert apply_mask(r, Mask(np.zeros((6, 6), bool))) == r
    full = apply_mask(r, Mask(np.ones((6, 6), bool)), 0.5)
    assert np.all(full.data == 0.5)
    one = np.zeros((6, 6), bool)
    one[2, 3] = True
    changed = apply_mask(r, Mask(one), 0.5).data != r.data
    assert changed.sum() == 3
    with pytest.raises(GeometryError):
        apply_mask(r, Mask(np.zeros((5, 6), bool)))


def test_mask_file_round_trip(tmp_path):
    m = random_mask((12, 9), 0.3, 99)
    save_mask(m, tmp_path / "m.rsr")
    back = load_mask(tmp_path / "m.rsr", seed=99)
    assert np.array_equal(back.data, m.data) and back.ratio == m.ratio
