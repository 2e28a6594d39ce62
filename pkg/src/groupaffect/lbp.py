"""Local binary pattern primitives shared by the face and body descriptors.

Neighbour ``p`` of ``P`` sits at angle ``2*pi*p/P`` on a circle of radius
``R``: row offset ``-R*sin``, column offset ``R*cos``.  Off-grid samples are
bilinearly interpolated.  A bit is set when ``sample - center >= 0``; the
difference is evaluated in the expanded form below so that flat regions give
exact zeros (ties encode as 1).
"""

from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np


@lru_cache(maxsize=None)
def neighbor_offsets(neighbors: int, radius: float):
    """Integer base offsets and fractional parts for each circular neighbour.

    Returns arrays ``(iy, ix, fy, fx)`` with ``offset = i + f`` and
    ``0 <= f < 1``.
    """
    ang = 2.0 * np.pi * np.arange(neighbors) / neighbors
    dy = np.round(-radius * np.sin(ang), 10)
    dx = np.round(radius * np.cos(ang), 10)
    iy = np.floor(dy).astype(np.int64)
    ix = np.floor(dx).astype(np.int64)
    return iy, ix, dy - iy, dx - ix


@lru_cache(maxsize=None)
def uniform_mapping(neighbors: int = 8) -> tuple[np.ndarray, int]:
    """Map raw codes to uniform-pattern labels.

    Uniform codes (at most two circular 0/1 transitions) get labels in
    ascending code order; every other code maps to the final label.
    For 8 neighbours this gives 59 bins.
    """
    n_codes = 1 << neighbors
    table = np.empty(n_codes, dtype=np.int64)
    label = 0
    nonuniform = []
    for code in range(n_codes):
        bits = [(code >> i) & 1 for i in range(neighbors)]
        transitions = sum(bits[i] != bits[(i + 1) % neighbors] for i in range(neighbors))
        if transitions <= 2:
            table[code] = label
            label += 1
        else:
            nonuniform.append(code)
    table[nonuniform] = label
    return table, label + 1


def _mapping(mapping: str | None, neighbors: int) -> tuple[np.ndarray, int]:
    if mapping is None or mapping == "none":
        return np.arange(1 << neighbors, dtype=np.int64), 1 << neighbors
    if mapping == "uniform":
        return uniform_mapping(neighbors)
    raise ValueError(f"unknown LBP mapping {mapping!r}")


def lbp_codes(image: np.ndarray, neighbors: int = 8, radius: float = 1) -> np.ndarray:
    """Raw LBP codes at every pixel whose full circle lies inside the image.

    Output has shape ``(H - 2r, W - 2r)`` with ``r = ceil(radius)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    r = int(np.ceil(radius))
    h, w = img.shape
    if h <= 2 * r or w <= 2 * r:
        raise ValueError(f"image {h}x{w} too small for radius {radius}")
    iy, ix, fy, fx = neighbor_offsets(neighbors, float(radius))
    oh, ow = h - 2 * r, w - 2 * r

    def view(dy, dx):
        return img[r + dy : r + dy + oh, r + dx : r + dx + ow]

    center = view(0, 0)
    codes = np.zeros((oh, ow), dtype=np.int64)
    for p in range(neighbors):
        a = view(iy[p], ix[p])
        d = a - center
        if fy[p] != 0.0 or fx[p] != 0.0:
            b = view(iy[p], ix[p] + 1)
            c = view(iy[p] + 1, ix[p])
            e = view(iy[p] + 1, ix[p] + 1)
            d = d + fy[p] * (c - a) + fx[p] * (b - a) + (fx[p] * fy[p]) * (a - b - c + e)
        codes |= (d >= 0).astype(np.int64) << p
    return codes


def lbp_histogram(image: np.ndarray, neighbors: int = 8, radius: float = 1, mapping: str | None = None) -> np.ndarray:
    table, nbins = _mapping(mapping, neighbors)
    codes = lbp_codes(image, neighbors, radius)
    return np.bincount(table[codes.ravel()], minlength=nbins).astype(np.float64)


# ---------------------------------------------------------------------------
# LBP-TOP
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _lbp_top_kernel(v, r, offs, fy, fx, fxy, table, nbins):
    # offs[plane, p] = flat offsets of the (a, b, c, e) interpolation corners
    nvol, nt, nh, nw = v.shape
    npts = fy.shape[0]
    flat = v.reshape(nvol, nt * nh * nw)
    hist = np.zeros((nvol, 3, nbins), dtype=np.int64)
    nx = nw - 2 * r
    code = np.zeros(nx, dtype=np.int64)
    for n in range(nvol):
        f = flat[n]
        for t in range(r, nt - r):
            for y in range(r, nh - r):
                i0 = (t * nh + y) * nw + r
                for plane in range(3):
                    code[:] = 0
                    for p in range(npts):
                        oa = i0 + offs[plane, p, 0]
                        ob = i0 + offs[plane, p, 1]
                        oc = i0 + offs[plane, p, 2]
                        oe = i0 + offs[plane, p, 3]
                        wy, wx, wxy = fy[p], fx[p], fxy[p]
                        bit = 1 << p
                        for x in range(nx):
                            a = f[oa + x]
                            b = f[ob + x]
                            c = f[oc + x]
                            d = (a - f[i0 + x]) + wy * (c - a) + wx * (b - a) + wxy * (a - b - c + f[oe + x])
                            if d >= 0.0:
                                code[x] |= bit
                    for x in range(nx):
                        hist[n, plane, table[code[x]]] += 1
    return hist


def _plane_offsets(shape, neighbors, radius):
    _, nh, nw = shape
    iy, ix, fy, fx = neighbor_offsets(neighbors, float(radius))
    st, sy, sx = nh * nw, nw, 1
    # (row stride, col stride) per plane: XY rows=y cols=x, XZ rows=t cols=x, YZ rows=t cols=y
    strides = [(sy, sx), (st, sx), (st, sy)]
    offs = np.zeros((3, neighbors, 4), dtype=np.int64)
    for plane, (rs, cs) in enumerate(strides):
        for p in range(neighbors):
            a = iy[p] * rs + ix[p] * cs
            if fy[p] == 0.0 and fx[p] == 0.0:
                offs[plane, p] = a
            else:
                offs[plane, p] = (a, a + cs, a + rs, a + rs + cs)
    return offs, fy, fx, fx * fy


def lbp_top_batch(volumes: np.ndarray, neighbors: int = 8, radius: float = 1, mapping: str | None = "uniform") -> np.ndarray:
    """LBP-TOP histograms for a batch of volumes laid out ``(N, T, H, W)``.

    Returns integer counts of shape ``(N, 3, Q)`` for the XY, XZ and YZ planes.
    Codes are taken at voxels whose sampling circles fit inside the volume in
    every plane.
    """
    v = np.ascontiguousarray(volumes, dtype=np.float64)
    if v.ndim != 4:
        raise ValueError("expected volumes of shape (N, T, H, W)")
    r = int(np.ceil(radius))
    if min(v.shape[1:]) <= 2 * r:
        raise ValueError(f"volume {v.shape[1:]} too small for radius {radius}")
    offs, fy, fx, fxy = _plane_offsets(v.shape[1:], neighbors, radius)
    table, nbins = _mapping(mapping, neighbors)
    return _lbp_top_kernel(v, r, offs, fy, fx, fxy, table, nbins)


def lbp_top(volume: np.ndarray, neighbors: int = 8, radius: float = 1, mapping: str | None = "uniform") -> np.ndarray:
    """Concatenated ``[H_XY | H_XZ | H_YZ]`` histogram of an ``(H, W, T)`` volume."""
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("expected a 3-D volume (H, W, T)")
    hist = lbp_top_batch(vol.transpose(2, 0, 1)[None], neighbors, radius, mapping)
    return hist[0].reshape(-1).astype(np.float64)
