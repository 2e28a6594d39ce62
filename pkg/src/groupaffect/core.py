"""Shared data model: manifest records, block grids, metrics and fold plans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

# Crop side used for every face and body detection before gridding.
CROP_SIZE = 128

LABEL_RANGE = (0.0, 5.0)
CLASS_IDS = (0, 1, 2)


class ManifestError(ValueError):
    """A manifest line could not be parsed."""


class ValidationError(ValueError):
    """A parsed record violates an invariant (label range, box bounds)."""


class Modality(str, Enum):
    FACE = "face"
    BODY = "body"
    SCENE = "scene"

    @property
    def code(self) -> int:
        return _MODALITY_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Modality":
        for mod, c in _MODALITY_CODES.items():
            if c == code:
                return mod
        raise ValueError(f"unknown modality code {code}")


_MODALITY_CODES = {Modality.FACE: 0, Modality.BODY: 1, Modality.SCENE: 2}


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValidationError(f"Rect.{name} must be an integer, got {v!r}")
            if v < 0:
                raise ValidationError(f"Rect.{name} must be non-negative, got {v}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"Rect must have positive size, got w={self.w} h={self.h}")

    def inside(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def as_list(self) -> list[int]:
        return [int(self.x), int(self.y), int(self.w), int(self.h)]


@dataclass
class GroupImageRecord:
    image_path: Path
    label: float
    face_boxes: list[Rect] = field(default_factory=list)
    body_boxes: list[Rect] = field(default_factory=list)

    @property
    def n_faces(self) -> int:
        return len(self.face_boxes)

    @property
    def n_bodies(self) -> int:
        return len(self.body_boxes)


@dataclass
class DescriptorSet:
    """Regional feature vectors of one image for one modality.

    ``source_counts`` holds the number of regions contributed by each
    detection (face, body) or a single entry for the whole scene.
    """

    modality: Modality
    regions: np.ndarray
    source_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        regions = np.asarray(self.regions)
        if regions.ndim != 2:
            raise ValueError(f"regions must be 2-D, got shape {regions.shape}")
        if not np.all(np.isfinite(regions)):
            raise ValueError("regions contain non-finite values")
        self.regions = regions
        if not self.source_counts and len(regions):
            self.source_counts = [len(regions)]
        if sum(self.source_counts) != len(regions):
            raise ValueError("source_counts do not add up to the region count")

    @property
    def dim(self) -> int:
        return self.regions.shape[1]

    def __len__(self) -> int:
        return self.regions.shape[0]

    @classmethod
    def empty(cls, modality: Modality, dim: int) -> "DescriptorSet":
        return cls(modality, np.zeros((0, dim), dtype=np.float32), [])


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")

    @property
    def n(self) -> int:
        return len(self.assignments)

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignments == f)) for f in range(self.k)]


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------


def _parse_boxes(raw, lineno: int, key: str) -> list[Rect]:
    if not isinstance(raw, list):
        raise ManifestError(f"line {lineno}: '{key}' must be a list")
    out = []
    for box in raw:
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise ManifestError(f"line {lineno}: each entry of '{key}' must be [x, y, w, h]")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise ManifestError(f"line {lineno}: non-numeric box in '{key}'")
        if any(float(v) != int(v) for v in box):
            raise ManifestError(f"line {lineno}: box coordinates in '{key}' must be integers")
        out.append([int(v) for v in box])
    return out


def check_label(label: float, task: str | None = None) -> None:
    if task in ("classification", "ovo", "category_ovo"):
        if label not in CLASS_IDS:
            raise ValidationError(f"class label must be one of {CLASS_IDS}, got {label}")
    elif not LABEL_RANGE[0] <= label <= LABEL_RANGE[1]:
        raise ValidationError(f"label {label} outside {LABEL_RANGE}")


def parse_manifest(path: str | Path, task: str | None = None, check_images: bool = True) -> list[GroupImageRecord]:
    """Read a line-delimited JSON manifest.

    Image paths are resolved relative to the manifest's directory. When
    ``check_images`` is set, every box is validated against the image size
    read from the file header.
    """
    path = Path(path)
    base = path.parent
    records: list[GroupImageRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            missing = [k for k in ("image", "label", "faces", "bodies") if k not in obj]
            if missing:
                raise ManifestError(f"line {lineno}: missing keys {missing}")
            if not isinstance(obj["image"], str):
                raise ManifestError(f"line {lineno}: 'image' must be a string")
            label = obj["label"]
            if not isinstance(label, (int, float)) or isinstance(label, bool):
                raise ManifestError(f"line {lineno}: 'label' must be a number")
            faces = _parse_boxes(obj["faces"], lineno, "faces")
            bodies = _parse_boxes(obj["bodies"], lineno, "bodies")

            name = obj["image"]
            try:
                check_label(float(label), task)
                face_rects = [Rect(*b) for b in faces]
                body_rects = [Rect(*b) for b in bodies]
            except ValidationError as exc:
                raise ValidationError(f"record {name!r} (line {lineno}): {exc}") from exc
            img_path = Path(name) if Path(name).is_absolute() else base / name
            rec = GroupImageRecord(img_path, float(label), face_rects, body_rects)
            if check_images:
                validate_record_bounds(rec, lineno)
            records.append(rec)
    return records


def validate_record_bounds(rec: GroupImageRecord, lineno: int | None = None) -> None:
    where = f" (line {lineno})" if lineno is not None else ""
    try:
        with Image.open(rec.image_path) as im:
            width, height = im.size
    except (OSError, FileNotFoundError) as exc:
        raise ValidationError(f"record {str(rec.image_path)!r}{where}: cannot read image header") from exc
    for r in rec.face_boxes + rec.body_boxes:
        if not r.inside(width, height):
            raise ValidationError(
                f"record {str(rec.image_path)!r}{where}: box {r.as_list()} outside image {width}x{height}"
            )


def record_to_json(rec: GroupImageRecord, relative_to: Path | None = None) -> str:
    name = rec.image_path
    if relative_to is not None:
        try:
            name = rec.image_path.relative_to(relative_to)
        except ValueError:
            pass
    label = int(rec.label) if float(rec.label).is_integer() else rec.label
    return json.dumps(
        {
            "image": str(name),
            "label": label,
            "faces": [r.as_list() for r in rec.face_boxes],
            "bodies": [r.as_list() for r in rec.body_boxes],
        }
    )


# ---------------------------------------------------------------------------
# Image helpers
# ---------------------------------------------------------------------------


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rounded luma 0.299R + 0.587G + 0.114B as float64."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb.copy()
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.floor(luma + 0.5)


def crop_resize(gray: np.ndarray, rect: Rect, size: int = CROP_SIZE) -> np.ndarray:
    """Crop ``rect`` from a grayscale image and resize bilinearly to size x size."""
    patch = np.asarray(gray[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w], dtype=np.float32)
    if patch.shape != (rect.h, rect.w):
        raise ValidationError(f"box {rect.as_list()} outside image {gray.shape[1]}x{gray.shape[0]}")
    if patch.shape == (size, size):
        return patch.astype(np.float64)
    im = Image.fromarray(patch, mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)


# ---------------------------------------------------------------------------
# Geometry, metrics, folds
# ---------------------------------------------------------------------------


def _axis_blocks(side: int, m: int, overlap: float) -> tuple[int, list[int]]:
    b = math.ceil(side / (1.0 + (m - 1) * (1.0 - overlap)) - 1e-9)
    if m == 1:
        return b, [0]
    pos = [int(math.floor(i * (side - b) / (m - 1) + 0.5)) for i in range(m)]
    return b, pos


def block_grid(side: int, m: int, n: int, overlap: float) -> list[Rect]:
    """Overlapping m x n block layout on a square image of the given side.

    Rows of blocks run along y (``m``), columns along x (``n``). Blocks are
    returned in row-major order.
    """
    if m < 1 or n < 1:
        raise ValueError("grid dimensions must be positive")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    if side < m or side < n:
        raise ValueError(f"side {side} smaller than grid {m}x{n}")
    bh, ys = _axis_blocks(side, m, overlap)
    bw, xs = _axis_blocks(side, n, overlap)
    if bh < 3 or bw < 3:
        raise ValueError("grid too fine")
    return [Rect(x, y, bw, bh) for y in ys for x in xs]


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(pred - truth)))


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(pred == truth))


def kfold_splits(n: int, k: int, seed: int) -> FoldPlan:
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def stack_regions(sets: Sequence[DescriptorSet]) -> np.ndarray:
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        raise ValueError(f"inconsistent region dimensions {sorted(dims)}")
    return np.concatenate([s.regions for s in sets], axis=0)
