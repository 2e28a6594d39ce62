"""Scene modality: LSC superpixels and per-superpixel mean dense SIFT."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage import measure
from skimage.color import rgb2lab

from .core import DescriptorSet, Modality, to_gray

SIFT_DIM = 128
DEFAULT_SUPERPIXELS = 200
LSC_RATIO = 0.075
LSC_COLOR_COEF = 20.0


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int, dense in [0, count)
    count: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)


# ---------------------------------------------------------------------------
# LSC superpixels
# ---------------------------------------------------------------------------


def lsc_features(image: np.ndarray, step_y: float, step_x: float, ratio: float = LSC_RATIO) -> np.ndarray:
    """Ten-dimensional LSC embedding (before weighting), shape (H, W, 10)."""
    rgb = np.asarray(image)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    rgb = rgb.astype(np.float64)
    if rgb.max() > 1.0:
        rgb = rgb / 255.0
    lab = rgb2lab(np.clip(rgb, 0.0, 1.0))
    h, w = lab.shape[:2]
    half_pi = math.pi / 2
    l = lab[..., 0] / 100.0 * half_pi
    a = (lab[..., 1] + 128.0) / 255.0 * half_pi
    b = (lab[..., 2] + 128.0) / 255.0 * half_pi
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xx / step_x * half_pi
    ty = yy / step_y * half_pi
    cc = LSC_COLOR_COEF
    cs = cc * ratio
    return np.stack(
        [
            cc * np.cos(l), cc * np.sin(l),
            2.55 * cc * np.cos(a), 2.55 * cc * np.sin(a),
            2.55 * cc * np.cos(b), 2.55 * cc * np.sin(b),
            cs * np.cos(tx), cs * np.sin(tx),
            cs * np.cos(ty), cs * np.sin(ty),
        ],
        axis=-1,
    )


def _seed_grid(h: int, w: int, target: int) -> tuple[int, int]:
    nx = max(1, int(round(math.sqrt(target * w / h))))
    nx = min(nx, target, w)
    ny = max(1, min(target // nx, h))
    return ny, nx


@numba.njit(cache=True)
def _lsc_centers(phi, weight, py, px, labels, k):
    # weighted feature means and plain spatial means, accumulated in pixel order
    n, dim = phi.shape
    centers = np.zeros((k, dim))
    wsum = np.zeros(k)
    cy = np.zeros(k)
    cx = np.zeros(k)
    counts = np.zeros(k)
    for i in range(n):
        c = labels[i]
        wsum[c] += weight[i]
        for j in range(dim):
            centers[c, j] += weight[i] * phi[i, j]
        cy[c] += py[i]
        cx[c] += px[i]
        counts[c] += 1.0
    alive = wsum > 0
    for c in range(k):
        if alive[c]:
            for j in range(dim):
                centers[c, j] /= wsum[c]
            cy[c] /= counts[c]
            cx[c] /= counts[c]
    return centers, cy, cx, alive


@numba.njit(cache=True)
def _lsc_assign(phi, py, px, cand, centers, cy, cx, alive, step_y, step_x, labels):
    n, dim = phi.shape
    out = labels.copy()
    for i in range(n):
        best = np.inf
        for j in range(cand.shape[1]):
            c = cand[i, j]
            if c < 0 or not alive[c]:
                continue
            if abs(cy[c] - py[i]) > step_y or abs(cx[c] - px[i]) > step_x:
                continue
            d = 0.0
            for k in range(dim):
                t = phi[i, k] - centers[c, k]
                d += t * t
            if d < best:
                best = d
                out[i] = c
    return out


def lsc_segment(image: np.ndarray, target_count: int = DEFAULT_SUPERPIXELS, ratio: float = LSC_RATIO, max_iter: int = 20) -> SuperpixelMap:
    """Linear spectral clustering superpixels.

    Weighted k-means in the LSC feature space (each pixel weighted by the
    inner product of its embedding with the sum of all embeddings), with
    each centre searching a window of one grid step around its spatial
    position, then connectivity enforcement.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if target_count < 1:
        raise ValueError("target_count must be at least 1")
    if h * w < target_count:
        raise ValueError(f"image of {h * w} pixels cannot hold {target_count} superpixels")
    ny, nx = _seed_grid(h, w, target_count)
    step_y, step_x = h / ny, w / nx

    feat = lsc_features(image, step_y, step_x, ratio).reshape(-1, 10)
    weight = feat @ feat.sum(axis=0)
    weight = np.maximum(weight, 1e-12)
    phi = feat / weight[:, None]
    yy, xx = np.mgrid[0:h, 0:w]
    py = yy.ravel().astype(np.float64)
    px = xx.ravel().astype(np.float64)

    # initial assignment: the seed grid cell of each pixel
    cell_y = np.minimum((py * ny / h).astype(np.int64), ny - 1)
    cell_x = np.minimum((px * nx / w).astype(np.int64), nx - 1)
    labels = cell_y * nx + cell_x
    k = ny * nx

    # candidate centres: 3x3 neighbourhood of the pixel's own seed cell
    cand = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cy = cell_y + dy
            cx = cell_x + dx
            ok = (cy >= 0) & (cy < ny) & (cx >= 0) & (cx < nx)
            cand.append(np.where(ok, cy * nx + cx, -1))
    cand = np.stack(cand, axis=1)

    for _ in range(max_iter):
        centers, cy_pos, cx_pos, alive = _lsc_centers(phi, weight, py, px, labels, k)

        new = _lsc_assign(phi, py, px, cand, centers, cy_pos, cx_pos, alive, step_y, step_x, labels)
        if np.array_equal(new, labels):
            break
        labels = new

    labels = enforce_connectivity(labels.reshape(h, w), min_size=max(1, (h * w) // (4 * k)), max_count=target_count)
    return SuperpixelMap(labels, int(labels.max()) + 1)


def enforce_connectivity(labels: np.ndarray, min_size: int = 1, max_count: int | None = None) -> np.ndarray:
    """Make every label a single 4-connected region.

    Each 4-connected piece of a cluster becomes its own segment.  Pieces are
    then visited smallest first, and one is merged into its largest adjacent
    segment while it is below ``min_size`` or there are more than
    ``max_count`` segments.  Output labels are dense, in raster order of
    first appearance.
    """
    h, w = labels.shape
    comp = measure.label(labels, background=-1, connectivity=1) - 1
    n_comp = int(comp.max()) + 1
    size = np.bincount(comp.ravel(), minlength=n_comp)

    # adjacency between components through 4-neighbour pixel pairs
    pairs = np.concatenate(
        [
            np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
            np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
        ]
    )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    keys = np.unique(np.concatenate([pairs[:, 0] * n_comp + pairs[:, 1], pairs[:, 1] * n_comp + pairs[:, 0]]))
    neighbors: list[set[int]] = [set() for _ in range(n_comp)]
    for a, b in zip((keys // n_comp).tolist(), (keys % n_comp).tolist()):
        neighbors[a].add(b)

    parent = list(range(n_comp))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    merged_size = size.astype(np.int64).tolist()
    limit = n_comp if max_count is None else max(1, int(max_count))
    n_roots = n_comp
    for c in sorted(range(n_comp), key=lambda i: (size[i], i)):
        if find(c) != c:
            continue
        if merged_size[c] >= min_size and n_roots <= limit:
            continue
        cand = {find(nb) for nb in neighbors[c]} - {c}
        if not cand:
            continue
        target = max(cand, key=lambda r: (merged_size[r], -r))
        parent[c] = target
        merged_size[target] += merged_size[c]
        neighbors[target] |= neighbors[c]
        n_roots -= 1

    roots = np.array([find(i) for i in range(n_comp)])
    flat = roots[comp.ravel()]
    _, first_idx = np.unique(flat, return_index=True)
    order_roots = flat[np.sort(first_idx)]
    remap = np.full(n_comp, -1, dtype=np.int64)
    remap[order_roots] = np.arange(len(order_roots))
    return remap[flat].reshape(h, w)


def label_map_png(smap: SuperpixelMap, path, seed: int = 0) -> None:
    """Write the label map as an RGB PNG with one random colour per label."""
    from PIL import Image

    colors = np.random.default_rng(seed).integers(0, 256, size=(smap.count, 3), dtype=np.uint8)
    Image.fromarray(colors[smap.labels]).save(path)


# ---------------------------------------------------------------------------
# Dense SIFT
# ---------------------------------------------------------------------------

SIFT_WINDOW = 16
SIFT_CELLS = 4
SIFT_ORIENT = 8
SIFT_CLIP = 0.2


def sift_axis_weights() -> np.ndarray:
    """Per-offset weights, shape (16, 4): Gaussian (sigma = 8) times the
    linear cell-interpolation weight of each of the 4 cells along one axis.

    Window offsets run -8..7 around the pixel; the sample position of offset
    ``d`` relative to the window centre is ``d + 0.5``.
    """
    d = np.arange(-SIFT_WINDOW // 2, SIFT_WINDOW // 2) + 0.5
    cell_w = SIFT_WINDOW / SIFT_CELLS
    centers = (np.arange(SIFT_CELLS) - (SIFT_CELLS - 1) / 2.0) * cell_w
    sigma = SIFT_WINDOW / 2.0
    g = np.exp(-(d**2) / (2.0 * sigma**2))
    lin = np.maximum(0.0, 1.0 - np.abs(d[:, None] - centers[None, :]) / cell_w)
    return g[:, None] * lin


def orientation_maps(gray: np.ndarray, pad: int = 0) -> np.ndarray:
    """Gradient magnitude split linearly over 8 orientation bins, shape (8, H+2p, W+2p).

    The image is edge-replicated by ``pad`` (plus one for the central
    differences) before differentiation.
    """
    g = np.pad(np.asarray(gray, dtype=np.float64), pad + 1, mode="edge")
    gx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2.0
    gy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * math.pi)
    pos = theta / (2 * math.pi / SIFT_ORIENT)
    b0 = np.floor(pos)
    frac = pos - b0
    b0 = b0.astype(np.int64) % SIFT_ORIENT
    b1 = (b0 + 1) % SIFT_ORIENT
    maps = np.zeros((SIFT_ORIENT,) + mag.shape)
    for o in range(SIFT_ORIENT):
        maps[o] = np.where(b0 == o, (1.0 - frac) * mag, 0.0) + np.where(b1 == o, frac * mag, 0.0)
    return maps


def normalize_sift(desc: np.ndarray) -> np.ndarray:
    """L2-normalise, clip at 0.2, L2-normalise again; zero rows stay zero."""
    desc = np.array(desc, dtype=np.float64)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)
    desc = np.minimum(desc, SIFT_CLIP)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    return np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)


def dense_sift_field(gray: np.ndarray, rows=None, cols=None) -> np.ndarray:
    """Upright 128-d SIFT descriptors on a pixel grid, shape (len(rows), len(cols), 128).

    ``rows`` and ``cols`` default to every row and column.  Bin layout is
    ``(cell_row * 4 + cell_col) * 8 + orientation``.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError("expected a grayscale image")
    h, w = gray.shape
    if h < SIFT_WINDOW or w < SIFT_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SIFT_WINDOW}x{SIFT_WINDOW} window")
    rows = np.arange(h) if rows is None else np.asarray(rows, dtype=np.int64)
    cols = np.arange(w) if cols is None else np.asarray(cols, dtype=np.int64)
    return _sift_from_maps(orientation_maps(gray, pad=SIFT_WINDOW // 2), rows, cols)


def _sift_from_maps(maps: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h = maps.shape[1] - SIFT_WINDOW
    w = maps.shape[2] - SIFT_WINDOW
    wts = sift_axis_weights()  # (16, 4)
    # offsets -8..7 map to padded indices y .. y+15
    win_x = sliding_window_view(maps[:, :, : w + SIFT_WINDOW - 1], SIFT_WINDOW, axis=2)[:, :, cols]
    along_x = win_x @ wts  # (8, H+16, nc, 4)
    win_y = sliding_window_view(along_x[:, : h + SIFT_WINDOW - 1], SIFT_WINDOW, axis=1)[:, rows]
    cells = (win_y @ wts).transpose(1, 2, 4, 3, 0)  # (nr, nc, 4 rows, 4 cols, 8)
    return normalize_sift(cells.reshape(len(rows), len(cols), SIFT_DIM))


def _segment_mean(labels: np.ndarray, feats: np.ndarray, count: int) -> np.ndarray:
    # stable sort keeps raster order inside each superpixel
    order = np.argsort(labels, kind="stable")
    lab = labels[order]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
    sums = np.add.reduceat(feats[order], starts, axis=0)
    out = np.zeros((count, feats.shape[1]))
    n = np.diff(np.r_[starts, len(lab)])
    out[lab[starts]] = sums / n[:, None]
    return out


def scene_descriptor(image: np.ndarray, smap: SuperpixelMap, stride: int = 2) -> np.ndarray:
    """Mean SIFT descriptor of each superpixel, shape (count, 128).

    Means are taken over member pixels on the ``stride`` lattice (rows and
    columns divisible by ``stride``); a superpixel with no lattice member
    falls back to all of its pixels.  ``stride=1`` averages every pixel.
    """
    image = np.asarray(image)
    gray = to_gray(image) if image.ndim == 3 else np.asarray(image, dtype=np.float64)
    if smap.labels.shape != gray.shape:
        raise ValueError(f"label map {smap.labels.shape} does not match image {gray.shape}")
    h, w = gray.shape
    labels = smap.labels
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    lat_lab = labels[np.ix_(rows, cols)].ravel()
    if h < SIFT_WINDOW or w < SIFT_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SIFT_WINDOW}x{SIFT_WINDOW} window")
    maps = orientation_maps(gray, pad=SIFT_WINDOW // 2)
    lat_feat = _sift_from_maps(maps, rows, cols).reshape(-1, SIFT_DIM)
    missing = np.setdiff1d(np.arange(smap.count), lat_lab)
    if len(missing):
        ys, xs = np.nonzero(np.isin(labels, missing))
        extra = np.stack([_sift_from_maps(maps, np.array([y]), np.array([x]))[0, 0] for y, x in zip(ys, xs)])
        lat_lab = np.concatenate([lat_lab, labels[ys, xs]])
        lat_feat = np.concatenate([lat_feat, extra])
    return _segment_mean(lat_lab, lat_feat, smap.count)


def scene_descriptor_set(image: np.ndarray, target_count: int = DEFAULT_SUPERPIXELS, stride: int = 2) -> DescriptorSet:
    smap = lsc_segment(image, target_count)
    feats = scene_descriptor(image, smap, stride)
    return DescriptorSet(Modality.SCENE, feats.astype(np.float32), [len(feats)])
