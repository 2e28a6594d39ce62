import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupaffect.lbp import lbp_codes, lbp_histogram, lbp_top, lbp_top_batch, uniform_mapping

from .oracles import naive_lbp_code, naive_lbp_top, uniform_label_table


def test_uniform_mapping_matches_independent_table():
    table, nbins = uniform_mapping(8)
    ref, ref_bins = uniform_label_table(8)
    assert nbins == ref_bins == 59
    assert np.array_equal(table, ref)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("radius", [1, 3])
def test_lbp_codes_match_naive_oracle(seed, radius):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 255, size=(14, 17))
    codes = lbp_codes(img, 8, radius)
    r = radius
    for y in range(codes.shape[0]):
        for x in range(codes.shape[1]):
            assert codes[y, x] == naive_lbp_code(lambda yy, xx: img[yy, xx], y + r, x + r, 8, radius)


def test_lbp_histogram_counts_and_ties():
    flat = np.full((10, 10), 42.0)
    h = lbp_histogram(flat, 8, 3)
    assert h.sum() == 16 and h[255] == 16
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(12, 9))
    assert lbp_histogram(img, 8, 1).sum() == 10 * 7


def test_lbp_too_small():
    with pytest.raises(ValueError):
        lbp_codes(np.zeros((6, 6)), 8, 3)


@pytest.mark.parametrize("seed", range(10))
def test_lbp_top_matches_naive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    vol = rng.normal(size=(12, 12, 12))
    got = lbp_top(vol)
    want = naive_lbp_top(vol, uniform_label_table(8)[0], 59)
    assert np.array_equal(got, want)


def test_lbp_top_non_cubic_and_raw_codes():
    rng = np.random.default_rng(5)
    vol = rng.normal(size=(7, 9, 11))
    table = np.arange(256)
    assert np.array_equal(lbp_top(vol, mapping=None), naive_lbp_top(vol, table, 256))


def test_lbp_top_constant_volume():
    h = lbp_top(np.full((6, 7, 8), 3.0)).reshape(3, 59)
    table, _ = uniform_mapping(8)
    interior = 4 * 5 * 6
    assert np.all(h.sum(axis=1) == interior)
    assert np.all(h[:, table[255]] == interior)


def test_lbp_top_batch_equals_single():
    rng = np.random.default_rng(9)
    vols = rng.normal(size=(3, 6, 8, 8))  # (N, T, H, W)
    batch = lbp_top_batch(vols)
    for i in range(3):
        single = lbp_top(vols[i].transpose(1, 2, 0))
        assert np.array_equal(batch[i].reshape(-1), single)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), offset=st.integers(-50, 50), power=st.integers(-4, 4))
def test_lbp_top_monotone_invariance(seed, offset, power):
    # exact shifts and power-of-two scales keep every tie exact
    vol = np.random.default_rng(seed).integers(0, 20, size=(5, 6, 7)).astype(np.float64)
    scale = 2.0**power
    assert np.array_equal(lbp_top(vol), lbp_top(vol * scale + offset))


def test_lbp_top_too_small():
    with pytest.raises(ValueError):
        lbp_top(np.zeros((2, 5, 5)))


@pytest.mark.parametrize("pos,bit", [((1, 2), 0), ((0, 1), 2), ((1, 0), 4), ((2, 1), 6)])
def test_neighbor_bit_order(pos, bit):
    # bit p sits at angle 2*pi*p/8, counter-clockwise from east with rows growing downwards
    img = np.zeros((3, 3))
    img[1, 1] = 1.0
    img[pos] = 2.0
    assert lbp_codes(img, 8, 1)[0, 0] == 1 << bit
