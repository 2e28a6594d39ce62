"""Upper-body block descriptor: edge-gated pyramid HOG plus a 256-bin LBP histogram."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DescriptorSet, Modality, block_grid
from .lbp import lbp_codes


@dataclass(frozen=True)
class PhogParams:
    levels: int = 3
    bins: int = 10
    signed: bool = True  # orientation range [0, 360)
    canny_sigma: float = 1.0
    high_ratio: float = 0.2
    low_ratio: float = 0.4

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("PHOG needs at least 2 bins")
        if self.levels < 0:
            raise ValueError("PHOG levels must be non-negative")

    @property
    def n_cells(self) -> int:
        return sum(4**lvl for lvl in range(self.levels + 1))

    @property
    def dim(self) -> int:
        return self.bins * self.n_cells


LBP_NEIGHBORS = 8
LBP_RADIUS = 3
LBP_BINS = 1 << LBP_NEIGHBORS


def body_feature_dim(params: PhogParams = PhogParams()) -> int:
    return params.dim + LBP_BINS


# ---------------------------------------------------------------------------
# Edges and gradients
# ---------------------------------------------------------------------------


def gradients(stack: np.ndarray, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives (gy, gx) of Gaussian-smoothed images, stack shape (N, h, w)."""
    smooth = ndimage.gaussian_filter(stack, sigma=(0, sigma, sigma), mode="nearest")
    # 3x3 Sobel per image; ndimage.sobel on a stack would also smooth across images
    diff, tri = [-1.0, 0.0, 1.0], [1.0, 2.0, 1.0]
    gy = ndimage.correlate1d(ndimage.correlate1d(smooth, diff, axis=1, mode="nearest"), tri, axis=2, mode="nearest")
    gx = ndimage.correlate1d(ndimage.correlate1d(smooth, diff, axis=2, mode="nearest"), tri, axis=1, mode="nearest")
    return gy, gx


def canny_stack(stack: np.ndarray, params: PhogParams = PhogParams(), grads=None) -> np.ndarray:
    """Canny edge masks for a stack of images.

    Thresholds are per image: high = ``high_ratio`` * max magnitude,
    low = ``low_ratio`` * high.  Returns a boolean array like ``stack``.
    """
    stack = np.asarray(stack, dtype=np.float64)
    gy, gx = grads if grads is not None else gradients(stack, params.canny_sigma)
    mag = np.hypot(gx, gy)
    n, h, w = mag.shape

    # non-maximum suppression along the gradient direction, quantised to 4 sectors
    ang = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)
    sector = (np.floor((ang + 22.5) / 45.0).astype(np.int64)) % 4
    pad = np.pad(mag, ((0, 0), (1, 1), (1, 1)))
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in steps.items():
        fwd = pad[:, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = pad[:, 1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag >= bwd)
    keep[:, 0, :] = keep[:, -1, :] = False
    keep[:, :, 0] = keep[:, :, -1] = False
    nms = np.where(keep, mag, 0.0)

    high = params.high_ratio * mag.reshape(n, -1).max(axis=1)
    low = params.low_ratio * high
    strong = (nms >= high[:, None, None]) & (nms > 0)
    weak = (nms >= low[:, None, None]) & (nms > 0)

    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1] = True
    labels, count = ndimage.label(weak, structure=structure)
    if count == 0:
        return np.zeros_like(weak)
    good = np.zeros(count + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    good[0] = False
    return good[labels]


# ---------------------------------------------------------------------------
# PHOG
# ---------------------------------------------------------------------------


def orientation_bins(gy: np.ndarray, gx: np.ndarray, params: PhogParams) -> np.ndarray:
    span = 360.0 if params.signed else 180.0
    ang = np.mod(np.rad2deg(np.arctan2(gy, gx)), span)
    idx = np.floor(ang * params.bins / span).astype(np.int64)
    return np.clip(idx, 0, params.bins - 1)


def _cell_index(size: int, cells: int) -> np.ndarray:
    return (np.arange(size) * cells) // size


def phog_from_gradients(weights: np.ndarray, bins: np.ndarray, params: PhogParams) -> np.ndarray:
    """Pyramid histograms for a stack of edge-gated magnitude maps.

    ``weights`` and ``bins`` have shape (N, h, w); output is (N, params.dim).
    Each pyramid level is L1-normalised on its own (all-zero levels stay zero).
    """
    n, h, w = weights.shape
    flat_w = weights.reshape(n, -1)
    parts = []
    for lvl in range(params.levels + 1):
        cells = 2**lvl
        cy = _cell_index(h, cells)[:, None]
        cx = _cell_index(w, cells)[None, :]
        cell = (cy * cells + cx).reshape(-1)
        key = cell[None, :] * params.bins + bins.reshape(n, -1)
        nk = cells * cells * params.bins
        key = key + (np.arange(n) * nk)[:, None]
        hist = np.bincount(key.ravel(), weights=flat_w.ravel(), minlength=n * nk).reshape(n, nk)
        total = hist.sum(axis=1, keepdims=True)
        hist = np.divide(hist, total, out=np.zeros_like(hist), where=total > 0)
        parts.append(hist)
    return np.concatenate(parts, axis=1)


def phog_stack(blocks: np.ndarray, params: PhogParams = PhogParams()) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 3:
        raise ValueError("expected a stack of blocks (N, h, w)")
    if blocks.shape[1] < 8 or blocks.shape[2] < 8:
        raise ValueError(f"block {blocks.shape[1:]} smaller than 8x8")
    gy, gx = gradients(blocks, params.canny_sigma)
    edges = canny_stack(blocks, params, grads=(gy, gx))
    weights = np.where(edges, np.hypot(gx, gy), 0.0)
    return phog_from_gradients(weights, orientation_bins(gy, gx, params), params)


def phog(block: np.ndarray, params: PhogParams = PhogParams()) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2:
        raise ValueError("expected a 2-D block")
    return phog_stack(block[None], params)[0]


# ---------------------------------------------------------------------------
# LBP histogram
# ---------------------------------------------------------------------------


def lbp_hist(block: np.ndarray, neighbors: int = LBP_NEIGHBORS, radius: float = LBP_RADIUS) -> np.ndarray:
    """Full (non-uniform) LBP code histogram over the block's valid interior."""
    block = np.asarray(block, dtype=np.float64)
    r = int(np.ceil(radius))
    if min(block.shape) <= 2 * r:
        raise ValueError(f"block {block.shape} too small for radius {radius}")
    codes = lbp_codes(block, neighbors, radius)
    return np.bincount(codes.ravel(), minlength=1 << neighbors).astype(np.float64)


def body_descriptor(
    body: np.ndarray,
    grid: tuple[int, int] = (16, 16),
    overlap: float = 0.7,
    params: PhogParams = PhogParams(),
) -> np.ndarray:
    """PHOG + LBP features of every block of a square grayscale body crop.

    LBP codes are computed once on the whole crop; a block's histogram counts
    the codes of pixels whose radius-3 circle lies inside that block, which is
    the same as coding the block on its own.
    """
    body = np.asarray(body, dtype=np.float64)
    if body.ndim != 2 or body.shape[0] != body.shape[1]:
        raise ValueError(f"body crop must be square, got {body.shape}")
    rects = block_grid(body.shape[0], grid[0], grid[1], overlap)
    blocks = np.stack([body[r.y : r.y + r.h, r.x : r.x + r.w] for r in rects])
    ph = phog_stack(blocks, params)

    r = LBP_RADIUS
    if min(blocks.shape[1:]) <= 2 * r:
        raise ValueError(f"block {blocks.shape[1:]} too small for LBP radius {r}")
    codes = lbp_codes(body, LBP_NEIGHBORS, r)  # codes[y - r, x - r] for pixel (y, x)
    lb = np.empty((len(rects), LBP_BINS), dtype=np.float64)
    for i, rect in enumerate(rects):
        sub = codes[rect.y : rect.y + rect.h - 2 * r, rect.x : rect.x + rect.w - 2 * r]
        lb[i] = np.bincount(sub.ravel(), minlength=LBP_BINS)
    return np.concatenate([ph, lb], axis=1)


def body_descriptor_set(
    crops: list[np.ndarray],
    grid: tuple[int, int] = (16, 16),
    overlap: float = 0.7,
    params: PhogParams = PhogParams(),
) -> DescriptorSet:
    if not crops:
        return DescriptorSet.empty(Modality.BODY, body_feature_dim(params))
    feats = [body_descriptor(c, grid, overlap, params) for c in crops]
    return DescriptorSet(Modality.BODY, np.concatenate(feats).astype(np.float32), [len(f) for f in feats])
