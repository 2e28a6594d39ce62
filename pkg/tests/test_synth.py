import numpy as np
import pytest

from groupaffect.core import parse_manifest
from groupaffect.synth import SynthParams, balanced_labels, gen_synthetic, render_image


def test_full_size_corpus_contract(tmp_path):
    manifest = gen_synthetic(tmp_path, 400, seed=3)
    recs = parse_manifest(manifest)  # also checks every box lies inside its image
    assert len(recs) == 400
    assert all(r.n_faces >= 1 and r.n_faces == r.n_bodies for r in recs)
    counts = np.bincount([int(r.label) for r in recs], minlength=6)
    assert np.all(np.abs(counts - 400 / 6) <= 0.2 * 400 / 6)


def test_same_seed_same_corpus(tmp_path):
    a = gen_synthetic(tmp_path / "a", 24, seed=5)
    b = gen_synthetic(tmp_path / "b", 24, seed=5)
    assert a.read_bytes() == b.read_bytes()
    for pa in sorted((tmp_path / "a" / "images").iterdir()):
        assert pa.read_bytes() == (tmp_path / "b" / "images" / pa.name).read_bytes()
    c = gen_synthetic(tmp_path / "c", 24, seed=6)
    assert c.read_bytes() != a.read_bytes()


def test_too_small_corpus():
    with pytest.raises(ValueError):
        gen_synthetic("/nonexistent", 19)


def test_balanced_labels():
    labels = balanced_labels(20, np.random.default_rng(0))
    assert sorted(np.bincount(labels).tolist()) == [3, 3, 3, 3, 4, 4]


def test_render_image_shapes():
    p = SynthParams()
    img, faces, bodies = render_image(2.0, np.random.default_rng(1), p)
    assert img.shape == (p.height, p.width, 3) and img.dtype == np.uint8
    assert 1 <= len(faces) <= p.slots and len(faces) == len(bodies)


def test_smile_tracks_label():
    # with all noise off, the mouth region differs between the extreme labels
    p = SynthParams(image_noise=0.0, person_noise=0.0, pixel_noise=0.0)
    lo, faces, _ = render_image(0.0, np.random.default_rng(2), p)
    hi, faces_hi, _ = render_image(5.0, np.random.default_rng(2), p)
    f = faces[0]
    assert faces == faces_hi
    assert not np.array_equal(lo[f.y : f.y + f.h, f.x : f.x + f.w], hi[f.y : f.y + f.h, f.x : f.x + f.w])
