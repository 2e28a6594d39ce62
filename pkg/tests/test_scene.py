import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from groupaffect.scene import (
    SuperpixelMap,
    dense_sift_field,
    enforce_connectivity,
    label_map_png,
    lsc_segment,
    scene_descriptor,
    scene_descriptor_set,
)


def naive_sift(gray, y, x):
    """One upright SIFT descriptor by explicit loops over the 16 x 16 window."""
    h, w = gray.shape

    def px(yy, xx):
        return gray[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]

    hist = np.zeros((4, 4, 8))
    centers = [-6.0, -2.0, 2.0, 6.0]
    for dy in range(-8, 8):
        for dx in range(-8, 8):
            sy, sx = y + dy, x + dx
            gx = (px(sy, sx + 1) - px(sy, sx - 1)) / 2
            gy = (px(sy + 1, sx) - px(sy - 1, sx)) / 2
            mag = math.hypot(gx, gy)
            if mag == 0:
                continue
            o = (math.atan2(gy, gx) % (2 * math.pi)) / (math.pi / 4)
            o0 = int(math.floor(o))
            frac = o - o0
            ry, rx = dy + 0.5, dx + 0.5
            g = math.exp(-(ry * ry + rx * rx) / (2 * 64.0))
            for i, cy in enumerate(centers):
                wy = max(0.0, 1 - abs(ry - cy) / 4)
                for j, cx in enumerate(centers):
                    wx = max(0.0, 1 - abs(rx - cx) / 4)
                    v = g * wy * wx * mag
                    hist[i, j, o0 % 8] += v * (1 - frac)
                    hist[i, j, (o0 + 1) % 8] += v * frac
    d = hist.reshape(-1)
    n = np.linalg.norm(d)
    if n == 0:
        return d
    d = np.minimum(d / n, 0.2)
    return d / np.linalg.norm(d)


@pytest.mark.parametrize("seed", range(10))
def test_dense_sift_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gray = rng.uniform(0, 255, size=(20, 23))
    rows, cols = [0, 7, 19], [0, 11, 22]
    got = dense_sift_field(gray, rows, cols)
    for i, y in enumerate(rows):
        for j, x in enumerate(cols):
            assert np.max(np.abs(got[i, j] - naive_sift(gray, y, x))) <= 1e-8


def test_sift_constant_image_is_zero():
    assert np.all(dense_sift_field(np.full((20, 20), 9.0)) == 0)


def test_sift_45_degree_rotation_shifts_one_bin():
    yy, xx = np.mgrid[0:40, 0:40].astype(np.float64)
    flat = dense_sift_field(xx, [20], [20])[0, 0].reshape(16, 8).sum(axis=0)
    turned = dense_sift_field((xx + yy) / math.sqrt(2), [20], [20])[0, 0].reshape(16, 8).sum(axis=0)
    assert np.argmax(flat) == 0 and np.argmax(turned) == 1
    assert np.allclose(np.roll(flat, 1), turned, atol=1e-12)


def test_sift_too_small():
    with pytest.raises(ValueError):
        dense_sift_field(np.zeros((15, 40)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sift_norms_bounded(seed):
    gray = np.random.default_rng(seed).uniform(0, 255, size=(18, 18))
    norms = np.linalg.norm(dense_sift_field(gray), axis=-1)
    assert np.all(norms <= 1 + 1e-9)
    assert np.all((np.abs(norms - 1) <= 1e-9) | (norms == 0))


def _is_four_connected(labels, count):
    for lab in range(count):
        _, n = ndimage.label(labels == lab)  # default structure is 4-connectivity
        if n != 1:
            return False
    return True


@pytest.mark.parametrize("seed", range(3))
def test_lsc_labels_dense_and_connected(seed):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.uniform(0, 255, size=(48, 40, 3)), (2, 2, 0)).astype(np.uint8)
    smap = lsc_segment(img, 12)
    assert smap.labels.shape == (48, 40)
    assert set(np.unique(smap.labels)) == set(range(smap.count))
    assert 1 <= smap.count <= 12
    assert smap.sizes().sum() == 48 * 40
    assert _is_four_connected(smap.labels, smap.count)
    again = lsc_segment(img, 12)
    assert np.array_equal(again.labels, smap.labels)


def test_lsc_single_superpixel():
    img = np.random.default_rng(1).integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
    smap = lsc_segment(img, 1)
    assert smap.count == 1 and np.all(smap.labels == 0)


def test_lsc_constant_image_four_regions():
    smap = lsc_segment(np.full((64, 64, 3), 128, dtype=np.uint8), 4)
    assert smap.count == 4
    assert np.all(np.abs(smap.sizes() - 1024) <= 0.25 * 1024)


def test_lsc_errors():
    with pytest.raises(ValueError):
        lsc_segment(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        lsc_segment(np.zeros((4, 4, 3)), 17)


def test_enforce_connectivity_splits_and_merges():
    labels = np.array([[0, 0, 1, 0], [0, 0, 1, 0], [2, 2, 2, 2]])
    out = enforce_connectivity(labels)
    assert out.max() + 1 == 4  # label 0 is two separate pieces
    assert _is_four_connected(out, 4)
    capped = enforce_connectivity(labels, max_count=2)
    assert capped.max() + 1 == 2 and _is_four_connected(capped, 2)
    big = enforce_connectivity(labels, min_size=3)
    assert np.all(np.bincount(big.ravel()) >= 3)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("stride", [1, 3])
def test_scene_descriptor_mean_oracle(stride, seed):
    rng = np.random.default_rng(seed)
    gray = rng.uniform(0, 255, size=(24, 20))
    labels = np.zeros((24, 20), dtype=np.int64)
    labels[:, 10:] = 1
    labels[12:, :] += 2
    labels[0, 0] = 4
    labels[1, 1] = 5  # off the stride-3 lattice, so it falls back to its own pixel
    smap = SuperpixelMap(labels, 6)
    got = scene_descriptor(gray, smap, stride)
    field = dense_sift_field(gray)
    for lab in range(6):
        on = (labels == lab) & (np.arange(24)[:, None] % stride == 0) & (np.arange(20)[None, :] % stride == 0)
        if not on.any():
            on = labels == lab
        want = field[on].mean(axis=0)
        assert np.max(np.abs(got[lab] - want)) <= 1e-12
    assert smap.sizes().sum() == 24 * 20
    assert np.all(np.linalg.norm(got, axis=1) <= 1 + 1e-9)


def test_scene_descriptor_shape_mismatch():
    with pytest.raises(ValueError):
        scene_descriptor(np.zeros((20, 20)), SuperpixelMap(np.zeros((20, 21), dtype=np.int64), 1))


def test_scene_descriptor_set_and_png(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    ds = scene_descriptor_set(img, 6, stride=2)
    assert ds.dim == 128 and ds.source_counts == [len(ds)] and 1 <= len(ds) <= 6
    label_map_png(lsc_segment(img, 6), tmp_path / "labels.png")
    assert (tmp_path / "labels.png").stat().st_size > 0
