"""Riesz-based volume LBP face descriptor.

Each block of a face crop is filtered in the frequency domain by a 5-scale,
8-orientation log-Gabor bank combined with first- and second-order Riesz
multipliers.  The 40 filter responses of one Riesz component are stacked into
a volume and summarised by LBP-TOP histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import DescriptorSet, Modality, block_grid
from .lbp import lbp_top, lbp_top_batch, uniform_mapping

RIESZ_COMPONENTS = ("x", "y", "xx", "xy", "yy")


@dataclass(frozen=True)
class LogGaborParams:
    scales: int = 5
    orientations: int = 8
    min_wavelength: float = 3.0
    mult: float = 2.0
    sigma_on_f: float = 0.65
    angular_sigma_factor: float = 0.6


@dataclass(frozen=True)
class LogGaborBank:
    """Frequency-domain transfer functions, scale-major with orientation fastest."""

    shape: tuple[int, int]
    params: LogGaborParams
    transfer: np.ndarray  # (scales * orientations, h, w), real

    @property
    def size(self) -> int:
        return self.shape[0]

    def __len__(self) -> int:
        return self.transfer.shape[0]


@dataclass
class RieszVolumeSet:
    x: np.ndarray
    y: np.ndarray
    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    def components(self) -> list[np.ndarray]:
        return [self.x, self.y, self.xx, self.xy, self.yy]


def _shape(size) -> tuple[int, int]:
    if isinstance(size, (tuple, list)):
        h, w = int(size[0]), int(size[1])
    else:
        h = w = int(size)
    if h < 8 or w < 8:
        raise ValueError(f"filter grid {h}x{w} too small (minimum 8)")
    return h, w


def _freq_grid(h: int, w: int):
    v = np.fft.fftfreq(h)[:, None] * np.ones((1, w))
    u = np.ones((h, 1)) * np.fft.fftfreq(w)[None, :]
    return u, v


def build_log_gabor_bank(size, params: LogGaborParams = LogGaborParams()) -> LogGaborBank:
    h, w = _shape(size)
    return _bank_cached(h, w, params)


@lru_cache(maxsize=32)
def _bank_cached(h: int, w: int, params: LogGaborParams) -> LogGaborBank:
    u, v = _freq_grid(h, w)
    radius = np.hypot(u, v)
    radius[0, 0] = 1.0  # avoid log(0); DC is zeroed below
    theta = np.arctan2(-v, u)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    spacing = math.pi / params.orientations
    ang_sigma = params.angular_sigma_factor * spacing
    log_sigma = math.log(params.sigma_on_f)

    radial = []
    for s in range(params.scales):
        f0 = 1.0 / (params.min_wavelength * params.mult**s)
        g = np.exp(-(np.log(radius / f0) ** 2) / (2.0 * log_sigma**2))
        g[0, 0] = 0.0
        radial.append(g)

    angular = []
    for o in range(params.orientations):
        ang = o * spacing
        ds = sin_t * math.cos(ang) - cos_t * math.sin(ang)
        dc = cos_t * math.cos(ang) + sin_t * math.sin(ang)
        dtheta = np.abs(np.arctan2(ds, dc))
        angular.append(np.exp(-(dtheta**2) / (2.0 * ang_sigma**2)))

    transfer = np.stack([r * a for r in radial for a in angular])
    transfer.setflags(write=False)
    return LogGaborBank((h, w), params, transfer)


def riesz_transfer(size) -> dict[str, np.ndarray]:
    """First- and second-order Riesz multipliers ``-i*u/|w|``, ``-i*v/|w|`` and products."""
    h, w = _shape(size)
    return _riesz_cached(h, w)


@lru_cache(maxsize=32)
def _riesz_cached(h: int, w: int) -> dict[str, np.ndarray]:
    u, v = _freq_grid(h, w)
    rho = np.hypot(u, v)
    rho[0, 0] = 1.0
    hx = -1j * u / rho
    hy = -1j * v / rho
    hx[0, 0] = 0.0
    hy[0, 0] = 0.0
    out = {"x": hx, "y": hy, "xx": hx * hx, "xy": hx * hy, "yy": hy * hy}
    for arr in out.values():
        arr.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def _combined_transfer(h: int, w: int, params: LogGaborParams) -> np.ndarray:
    bank = _bank_cached(h, w, params)
    riesz = _riesz_cached(h, w)
    return np.stack([bank.transfer * riesz[t] for t in RIESZ_COMPONENTS])  # (5, F, h, w)


def _filter_blocks(blocks: np.ndarray, params: LogGaborParams) -> np.ndarray:
    """Real filter responses for a stack of blocks, shape (B, 5, F, h, w)."""
    _, h, w = blocks.shape
    combined = _combined_transfer(h, w, params)
    spec = np.fft.fft2(blocks)
    return np.fft.ifft2(spec[:, None, None] * combined[None]).real


def riesz_volumes(block: np.ndarray, bank: LogGaborBank) -> RieszVolumeSet:
    block = np.asarray(block, dtype=np.float64)
    if block.shape != bank.shape:
        raise ValueError(f"block shape {block.shape} does not match bank {bank.shape}")
    resp = _filter_blocks(block[None], bank.params)[0]  # (5, F, h, w)
    vols = [np.ascontiguousarray(r.transpose(1, 2, 0)) for r in resp]
    return RieszVolumeSet(*vols)


def rvlbp_block(block: np.ndarray, bank: LogGaborBank) -> np.ndarray:
    """RVLBP feature of one block: concat over components of [H_XY|H_XZ|H_YZ]."""
    vols = riesz_volumes(block, bank)
    return np.concatenate([lbp_top(v, 8, 1, "uniform") for v in vols.components()])


def face_feature_dim(params: LogGaborParams = LogGaborParams()) -> int:
    return len(RIESZ_COMPONENTS) * 3 * uniform_mapping(8)[1]


def face_descriptor(
    face: np.ndarray,
    grid: tuple[int, int] = (16, 16),
    overlap: float = 0.7,
    params: LogGaborParams = LogGaborParams(),
    chunk: int = 16,
) -> np.ndarray:
    """RVLBP features of every block of a square grayscale face crop.

    Returns an array of shape ``(m*n, 885)`` in row-major block order.
    """
    face = np.asarray(face, dtype=np.float64)
    if face.ndim != 2 or face.shape[0] != face.shape[1]:
        raise ValueError(f"face crop must be square, got {face.shape}")
    rects = block_grid(face.shape[0], grid[0], grid[1], overlap)
    blocks = np.stack([face[r.y : r.y + r.h, r.x : r.x + r.w] for r in rects])
    _shape(blocks.shape[1:])
    out = np.empty((len(rects), face_feature_dim(params)), dtype=np.float64)
    for start in range(0, len(rects), chunk):
        resp = _filter_blocks(blocks[start : start + chunk], params)
        nb, nc, nf, h, w = resp.shape
        hist = lbp_top_batch(resp.reshape(nb * nc, nf, h, w), 8, 1, "uniform")
        out[start : start + nb] = hist.reshape(nb, -1)
    return out


def face_descriptor_set(
    crops: list[np.ndarray],
    grid: tuple[int, int] = (16, 16),
    overlap: float = 0.7,
    params: LogGaborParams = LogGaborParams(),
) -> DescriptorSet:
    if not crops:
        return DescriptorSet.empty(Modality.FACE, face_feature_dim(params))
    feats = [face_descriptor(c, grid, overlap, params) for c in crops]
    return DescriptorSet(Modality.FACE, np.concatenate(feats).astype(np.float32), [len(f) for f in feats])
