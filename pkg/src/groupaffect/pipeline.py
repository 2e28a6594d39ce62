"""End-to-end orchestration: extraction, vocabularies, encoding, fusion and evaluation."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .body import body_descriptor_set, body_feature_dim
from .core import (
    DescriptorSet,
    GroupImageRecord,
    Modality,
    accuracy,
    crop_resize,
    kfold_splits,
    load_rgb,
    mae,
    parse_manifest,
    to_gray,
)
from .face import LogGaborParams, face_descriptor_set, face_feature_dim
from .infa import Encoder, Vocabulary, fit_vocabulary
from .rlmkl import (
    C_GRID,
    EPS_GRID,
    FitOptions,
    KernelKind,
    KernelSpec,
    Task,
    decision_function,
    fit_rlmkl,
    ovo_fit,
    ovo_predict,
    select_hyperparameters,
)
from .scene import SIFT_DIM, lsc_segment, scene_descriptor

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

MODALITIES = ("face", "body", "scene")
TASKS = ("intensity_regression", "category_ovo")
MISSING_POLICIES = ("drop", "mean_substitute")
# keys that change how a run executes but not what it computes
_RUNTIME_KEYS = ("jobs", "manifest", "out_dir")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Flat run configuration; the defaults are the full-size settings."""

    manifest: str = ""
    out_dir: str = ""
    split_file: str = ""  # JSON {"train": [...], "test": [...]}; replaces k-fold CV when set
    task: str = "intensity_regression"
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))
    seed: int = 0
    folds: int = 4
    missing: str = "drop"
    encoder: str = "fisher"
    improved_fisher: bool = False
    max_pool_rows: int = 500_000
    jobs: int = 1

    crop_size: int = 128
    face_grid: list[int] = field(default_factory=lambda: [16, 16])
    face_overlap: float = 0.7
    face_pca_dim: int = 256
    face_words: int = 180
    face_scales: int = 5
    face_orientations: int = 8
    body_grid: list[int] = field(default_factory=lambda: [16, 16])
    body_overlap: float = 0.7
    body_pca_dim: int = 128
    body_words: int = 130
    scene_superpixels: int = 200
    scene_stride: int = 2
    scene_pca_dim: int = 64
    scene_words: int = 10

    kernel: str = "linear"
    s: float = 10.0
    C: float | None = None
    eps: float | None = None
    whiten_dim: int = 32
    inner_folds: int = 10
    c_grid: list[float] = field(default_factory=lambda: list(C_GRID))
    eps_grid: list[float] = field(default_factory=lambda: list(EPS_GRID))
    learn_gating: bool = True
    smo_tol: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.missing not in MISSING_POLICIES:
            raise ConfigError(f"missing must be one of {MISSING_POLICIES}, got {self.missing!r}")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modalities repeated")
        Encoder(self.encoder)
        KernelKind(self.kernel)
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        for key in ("face_grid", "body_grid"):
            g = getattr(self, key)
            if len(g) != 2 or min(g) < 1:
                raise ConfigError(f"{key} must be two positive integers")
        for key in ("face_pca_dim", "face_words", "body_pca_dim", "body_words", "scene_pca_dim", "scene_words", "scene_superpixels", "crop_size", "jobs", "face_scales", "face_orientations"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.whiten_dim < 0:
            raise ConfigError("whiten_dim must be non-negative (0 turns whitening off)")
        if self.s <= 0:
            raise ConfigError("s must be positive")
        if not self.c_grid or min(self.c_grid) <= 0:
            raise ConfigError("c_grid must hold positive values")
        if not self.eps_grid or min(self.eps_grid) < 0:
            raise ConfigError("eps_grid must hold non-negative values")
        if self.smo_tol <= 0:
            raise ConfigError("smo_tol must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        cfg = cls.from_dict(data)
        base = Path(path).parent
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(base / cfg.manifest)
        if cfg.split_file and not Path(cfg.split_file).is_absolute():
            cfg.split_file = str(base / cfg.split_file)
        return cfg

    def computational(self) -> dict:
        """The settings that determine results (everything except runtime keys)."""
        d = asdict(self)
        for key in _RUNTIME_KEYS:
            d.pop(key)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.computational(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def vocab_params(self, modality: str) -> tuple[int, int]:
        return getattr(self, f"{modality}_pca_dim"), getattr(self, f"{modality}_words")


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def region_dim(modality: str, cfg: PipelineConfig | None = None) -> int:
    return {"face": face_feature_dim(), "body": body_feature_dim(), "scene": SIFT_DIM}[modality]


def extract_image(rec: GroupImageRecord, modality: str, cfg: PipelineConfig) -> DescriptorSet:
    rgb = load_rgb(rec.image_path)
    if modality == "scene":
        smap = lsc_segment(rgb, cfg.scene_superpixels)
        feats = scene_descriptor(rgb, smap, cfg.scene_stride)
        return DescriptorSet(Modality.SCENE, feats.astype(np.float32), [len(feats)])
    gray = to_gray(rgb)
    if modality == "face":
        crops = [crop_resize(gray, r, cfg.crop_size) for r in rec.face_boxes]
        bank = LogGaborParams(scales=cfg.face_scales, orientations=cfg.face_orientations)
        return face_descriptor_set(crops, tuple(cfg.face_grid), cfg.face_overlap, bank)
    crops = [crop_resize(gray, r, cfg.crop_size) for r in rec.body_boxes]
    return body_descriptor_set(crops, tuple(cfg.body_grid), cfg.body_overlap)


def _extract_one(rec, modality, cfg):
    try:
        return extract_image(rec, modality, cfg), None
    except (OSError, ValueError) as exc:
        return None, f"{rec.image_path}: {exc}"


def run_extract(records: Sequence[GroupImageRecord], modality: str, cfg: PipelineConfig) -> tuple[list[DescriptorSet], list[str]]:
    """Descriptor sets for every record, in manifest order.

    Records that fail produce an empty set and an error message; the run
    carries on.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    if cfg.jobs > 1:
        results = Parallel(n_jobs=cfg.jobs)(delayed(_extract_one)(r, modality, cfg) for r in records)
    else:
        results = [_extract_one(r, modality, cfg) for r in records]
    dim = region_dim(modality)
    sets, errors = [], []
    for ds, err in results:
        if err is not None:
            errors.append(err)
            ds = DescriptorSet.empty(Modality(modality), dim)
        sets.append(ds)
    return sets, errors


# ---------------------------------------------------------------------------
# Encoding and evaluation
# ---------------------------------------------------------------------------


def fit_modality_vocab(sets: Sequence[DescriptorSet], modality: str, cfg: PipelineConfig, seed: int) -> Vocabulary:
    pca_dim, words = cfg.vocab_params(modality)
    return fit_vocabulary(sets, cfg.encoder, pca_dim, words, seed, cfg.max_pool_rows, modality)


def encode_sets(vocab: Vocabulary, sets: Sequence[DescriptorSet], improved: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Encoded matrix (n, dim) and a mask of images that had regions."""
    out = np.zeros((len(sets), vocab.out_dim))
    present = np.array([len(s) > 0 for s in sets])
    for i, s in enumerate(sets):
        if present[i]:
            out[i] = vocab.encode(s, improved)
    return out, present


def _kernel_spec(cfg: PipelineConfig) -> KernelSpec:
    return KernelSpec(KernelKind(cfg.kernel), cfg.s)


def _fit_options(cfg: PipelineConfig, fused: bool = True) -> FitOptions:
    # single-modality baselines are plain machines on the encoded vectors;
    # whitening and gating belong to the fusion machine
    whiten_dim = cfg.whiten_dim if fused else 0
    return FitOptions(whiten_dim=whiten_dim, learn_gating=cfg.learn_gating, tol=cfg.smo_tol)


def _fit_predict(train_x, y_tr, test_x, kernels, cfg: PipelineConfig, seed: int, fused: bool = True) -> tuple[np.ndarray, dict]:
    options = _fit_options(cfg, fused)
    task = "regression" if cfg.task == "intensity_regression" else "ovo"
    if cfg.C is None or (task == "regression" and cfg.eps is None):
        C, eps = select_hyperparameters(
            train_x, y_tr, task, kernels, cfg.c_grid, cfg.eps_grid, folds=cfg.inner_folds, seed=seed, options=options
        )
        C = C if cfg.C is None else cfg.C
        eps = eps if cfg.eps is None else cfg.eps
    else:
        C, eps = cfg.C, (cfg.eps if cfg.eps is not None else 0.1)
    if task == "regression":
        model = fit_rlmkl(train_x, y_tr, Task.REGRESSION, kernels, C, eps, seed, options)
        pred = np.clip(decision_function(model, test_x), 0.0, 5.0)
        info = {"C": C, "eps": eps, "mean_gates": model.training_gates().mean(axis=0).round(12).tolist()}
    else:
        model = ovo_fit(train_x, y_tr.astype(np.int64), kernels, C, seed, options, n_classes=3)
        pred = ovo_predict(model, test_x)
        info = {"C": C}
    return pred, info


def _score(cfg: PipelineConfig, pred, truth) -> float:
    return mae(pred, truth) if cfg.task == "intensity_regression" else accuracy(pred, truth)


def evaluate_split(
    features: dict[str, Sequence[DescriptorSet]],
    labels: np.ndarray,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    cfg: PipelineConfig,
    seed: int,
    fuse: bool = True,
) -> dict:
    """Fit vocabularies on the training images, encode, fit single-modality
    linear machines and the fused machine, and score on the test images.

    With ``fuse=False`` only the single-modality machines are fitted and
    ``fusion`` is None.
    """
    mods = list(cfg.modalities)
    encoded, present = {}, {}
    for m in mods:
        sets = features[m]
        vocab = fit_modality_vocab([sets[i] for i in train_idx], m, cfg, seed)
        enc, pres = encode_sets(vocab, sets, cfg.improved_fisher)
        if cfg.missing == "mean_substitute":
            if not pres[train_idx].any():
                raise ValueError(f"no training image has the {m} modality")
            fill = enc[train_idx][pres[train_idx]].mean(axis=0)
            enc[~pres] = fill
        encoded[m], present[m] = enc, pres

    if cfg.missing == "drop":
        keep = np.logical_and.reduce([present[m] for m in mods])
        train_idx = train_idx[keep[train_idx]]
        test_idx = test_idx[keep[test_idx]]
    if len(train_idx) < 2 or len(test_idx) < 1:
        raise ValueError("empty fold after removing images without detections")

    y_tr = labels[train_idx]
    y_te = labels[test_idx]
    linear = KernelSpec(KernelKind.LINEAR)
    single, info = {}, {}
    for m in mods:
        pred, _ = _fit_predict([encoded[m][train_idx]], y_tr, [encoded[m][test_idx]], [linear], cfg, seed, fused=False)
        single[m] = _score(cfg, pred, y_te)
    kernels = [_kernel_spec(cfg)] * len(mods)
    if not fuse:
        fusion = None
    elif len(mods) == 1 and kernels[0] == linear and cfg.whiten_dim == 0:
        # a one-modality fusion without whitening is the single machine above
        fusion, info = single[mods[0]], {}
    else:
        pred, info = _fit_predict(
            [encoded[m][train_idx] for m in mods], y_tr, [encoded[m][test_idx] for m in mods], kernels, cfg, seed
        )
        fusion = _score(cfg, pred, y_te)
    return {
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "single": single,
        "fusion": fusion,
        "fusion_params": info,
    }


@dataclass
class ExperimentReport:
    config_hash: str
    config: dict
    metric: str
    n_images: int
    folds: list[dict]
    aggregate: dict
    extraction_errors: dict
    timing: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Deterministic JSON; timing is left out (see ``timing_json``)."""
        d = asdict(self)
        d.pop("timing")
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def timing_json(self) -> str:
        return json.dumps(self.timing, sort_keys=True, indent=2) + "\n"


def extract_all(records, cfg: PipelineConfig) -> tuple[dict, dict, dict]:
    features, errors, timing = {}, {}, {}
    for m in cfg.modalities:
        t0 = time.perf_counter()
        features[m], errors[m] = run_extract(records, m, cfg)
        timing[f"extract_{m}"] = time.perf_counter() - t0
    return features, errors, timing


def load_split(path: str | Path, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Read a fixed split: JSON with "train" and "test" lists of 0-based manifest indices."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        train = np.array(sorted(data["train"]), dtype=np.int64)
        test = np.array(sorted(data["test"]), dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad split file ({exc})") from exc
    both = np.concatenate([train, test])
    if len(both) and (both.min() < 0 or both.max() >= n):
        raise ConfigError(f"{path}: index outside [0, {n})")
    if len(np.unique(both)) != len(both):
        raise ConfigError(f"{path}: train and test overlap or repeat indices")
    if len(train) < 2 or len(test) < 1:
        raise ConfigError(f"{path}: need at least 2 training and 1 test image")
    return train, test


def run_experiment(cfg: PipelineConfig, records: Sequence[GroupImageRecord] | None = None, features: dict | None = None) -> ExperimentReport:
    """k-fold cross-validated evaluation of every single modality and the fusion.

    With ``split_file`` set the report has a single fold: the fixed split.
    """
    if records is None:
        if not cfg.manifest:
            raise ConfigError("no manifest given")
        task = "category_ovo" if cfg.task == "category_ovo" else None
        records = parse_manifest(cfg.manifest, task=task)
    labels = np.array([r.label for r in records], dtype=np.float64)
    timing: dict = {}
    errors: dict = {}
    if features is None:
        features, errors, timing = extract_all(records, cfg)
    if cfg.split_file:
        splits = [load_split(cfg.split_file, len(records))]
    else:
        plan = kfold_splits(len(records), cfg.folds, cfg.seed)
        splits = [(plan.train_index(f), plan.test_index(f)) for f in range(cfg.folds)]

    def one_fold(f):
        res = evaluate_split(features, labels, splits[f][0], splits[f][1], cfg, cfg.seed + f)
        res["fold"] = f
        return res

    t0 = time.perf_counter()
    if cfg.jobs > 1:
        folds = Parallel(n_jobs=min(cfg.jobs, len(splits)))(delayed(one_fold)(f) for f in range(len(splits)))
    else:
        folds = [one_fold(f) for f in range(len(splits))]
    timing["folds"] = time.perf_counter() - t0
    aggregate = {
        "single": {m: float(np.mean([r["single"][m] for r in folds])) for m in cfg.modalities},
        "fusion": float(np.mean([r["fusion"] for r in folds])),
    }
    metric = "mae" if cfg.task == "intensity_regression" else "accuracy"
    return ExperimentReport(cfg.config_hash(), cfg.computational(), metric, len(records), folds, aggregate, errors, timing)


def write_report(report: ExperimentReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    (out / "timing.json").write_text(report.timing_json(), encoding="utf-8")
    return path
