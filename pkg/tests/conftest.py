import json

import pytest

from groupaffect.core import parse_manifest
from groupaffect.pipeline import PipelineConfig, extract_all
from groupaffect.synth import gen_synthetic

# small enough that a whole cross-validated run takes a few seconds
TINY = dict(
    crop_size=16,
    face_grid=[2, 2],
    face_overlap=0.5,
    face_scales=2,
    face_orientations=2,
    face_pca_dim=4,
    face_words=2,
    body_grid=[2, 2],
    body_overlap=0.5,
    body_pca_dim=4,
    body_words=2,
    scene_superpixels=8,
    scene_stride=8,
    scene_pca_dim=4,
    scene_words=2,
    whiten_dim=4,
    folds=2,
    inner_folds=2,
    c_grid=[1.0],
    eps_grid=[0.1],
)


def write_toml(path, data):
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    path.write_text("".join(f"{k} = {fmt(v)}\n" for k, v in data.items()), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = gen_synthetic(root, 24, seed=11)
    return manifest


@pytest.fixture(scope="session")
def tiny_features(tiny_corpus):
    records = parse_manifest(tiny_corpus)
    cfg = PipelineConfig(**TINY)
    features, errors, _ = extract_all(records, cfg)
    return records, features, errors


# lines recorded by the acceptance tests, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
