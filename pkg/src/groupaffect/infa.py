"""Aggregation of regional features into one vector per image.

PCA projection, a diagonal-covariance GMM vocabulary trained by EM and the
Fisher difference encoding, plus k-means based BoW and VLAD baselines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import DescriptorSet, Modality

VAR_FLOOR = 1e-6
EM_TOL = 1e-5
EM_MAX_ITER = 200
MAX_POOL_ROWS = 500_000
CODEBOOK_FORMAT = 1


class Encoder(str, Enum):
    FISHER = "fisher"
    BOW = "bow"
    VLAD = "vlad"


class NoDetectionsError(ValueError):
    """An image has no regions for the modality being encoded."""


@dataclass
class PcaModel:
    mean: np.ndarray  # (d,)
    basis: np.ndarray  # (d, D), orthonormal columns
    eigenvalues: np.ndarray  # (D,)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]


@dataclass
class GmmCodebook:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class KMeansCodebook:
    centers: np.ndarray  # (K, D)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class EncodedImage:
    vector: np.ndarray
    encoder: Encoder
    modality: Modality | None = None


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def fit_pca(regions: np.ndarray, dim: int) -> PcaModel:
    """Top-``dim`` principal axes of the mean-centred rows.

    Columns are ordered by decreasing eigenvalue and signed so that the
    entry of largest magnitude is positive.
    """
    x = np.asarray(regions, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("regions must be a 2-D matrix")
    n, d = x.shape
    if dim < 1 or dim > d:
        raise ValueError(f"PCA dimension {dim} outside [1, {d}]")
    if n <= dim:
        raise ValueError(f"PCA needs more than {dim} rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dim]
    vals, vecs = vals[order], vecs[:, order]
    big = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[big, np.arange(dim)])
    signs[signs == 0] = 1.0
    return PcaModel(mean, vecs * signs, np.maximum(vals, 0.0))


def transform_pca(model: PcaModel, regions: np.ndarray) -> np.ndarray:
    x = np.asarray(regions, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != model.input_dim:
        raise ValueError(f"region dimension {x.shape[1]} does not match PCA input {model.input_dim}")
    return (x - model.mean) @ model.basis


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centre uniform, then D^2 sampling."""
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = sq_distances(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, sq_distances(x, x[nxt : nxt + 1])[:, 0])
    return x[idx].copy()


def fit_kmeans(regions: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansCodebook:
    x = np.asarray(regions, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"k-means with {k} centres needs at least {k} rows, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        dist = sq_distances(x, centers)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point worst served by its centre
            far = int(np.argmax(dist[np.arange(len(x)), labels]))
            sums[j] = x[far]
            counts[j] = 1
            dist[far] = 0.0
        centers = sums / counts[:, None]
    return KMeansCodebook(centers)


def nearest_center(codebook: KMeansCodebook, x: np.ndarray) -> np.ndarray:
    return np.argmin(sq_distances(np.asarray(x, dtype=np.float64), codebook.centers), axis=1)


# ---------------------------------------------------------------------------
# GMM
# ---------------------------------------------------------------------------


def log_densities(codebook: GmmCodebook, x: np.ndarray) -> np.ndarray:
    """log(w_k N(x; mu_k, sigma_k^2)) for every row and component, shape (n, K)."""
    x = np.asarray(x, dtype=np.float64)
    inv = 1.0 / codebook.variances
    quad = (x * x) @ inv.T - 2.0 * x @ (codebook.means * inv).T + (codebook.means**2 * inv).sum(1)
    log_norm = -0.5 * (codebook.dim * math.log(2 * math.pi) + np.log(codebook.variances).sum(1))
    return np.log(codebook.weights) + log_norm - 0.5 * quad


def posteriors(codebook: GmmCodebook, x: np.ndarray) -> np.ndarray:
    """Soft assignments, rows summing to one.  Accepts one vector or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lp = log_densities(codebook, x[None] if single else x)
    post = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return post[0] if single else post


def mean_loglik(codebook: GmmCodebook, x: np.ndarray) -> float:
    return float(logsumexp(log_densities(codebook, x), axis=1).mean())


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0)
    k = resp.shape[1]
    weights = (nk + 1e-10) / (len(x) + k * 1e-10)
    safe = np.maximum(nk, 1e-300)[:, None]
    means = (resp.T @ x) / safe
    var = (resp.T @ (x * x)) / safe - means**2
    return weights, means, np.maximum(var, floor)


def fit_gmm(
    regions: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    floor: float = VAR_FLOOR,
) -> GmmCodebook:
    """Diagonal-covariance GMM fitted by EM from a k-means++ start.

    The initial responsibilities are hard assignments to the seeded centres.
    Stops when the relative gain in mean log-likelihood drops below ``tol``.
    ``loglik_trace`` records the mean log-likelihood after each M-step.
    """
    x = np.asarray(regions, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("regions must be a 2-D matrix")
    if len(x) < 10 * k:
        raise ValueError(f"GMM with K={k} needs at least {10 * k} rows, got {len(x)}")
    rng = np.random.default_rng(seed)
    seeds = kmeans_pp(x, k, rng)
    resp = np.zeros((len(x), k))
    resp[np.arange(len(x)), np.argmin(sq_distances(x, seeds), axis=1)] = 1.0
    gmm = GmmCodebook(*_m_step(x, resp, floor))

    trace: list[float] = []
    prev = None
    for _ in range(max_iter):
        lp = log_densities(gmm, x)
        norm = logsumexp(lp, axis=1, keepdims=True)
        ll = float(norm.mean())
        trace.append(ll)
        if prev is not None and (ll - prev) < tol * abs(prev):
            break
        prev = ll
        gmm = GmmCodebook(*_m_step(x, np.exp(lp - norm), floor))
    gmm.loglik_trace = trace
    return gmm


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def _project(pca: PcaModel | None, regions) -> np.ndarray:
    x = regions.regions if isinstance(regions, DescriptorSet) else regions
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise NoDetectionsError("no detections")
    return x if pca is None else transform_pca(pca, x)


def fisher_encode(codebook: GmmCodebook, pca: PcaModel | None, regions, improved: bool = False) -> np.ndarray:
    """First- and second-order Fisher differences, laid out [phi1_1, phi2_1, ..., phi1_K, phi2_K].

    With ``improved`` the result is signed-square-rooted and L2-normalised.
    """
    x = _project(pca, regions)
    r = len(x)
    alpha = posteriors(codebook, x)
    sigma = np.sqrt(codebook.variances)
    out = np.empty((codebook.K, 2, codebook.dim))
    for k in range(codebook.K):
        z = (x - codebook.means[k]) / sigma[k]
        out[k, 0] = alpha[:, k] @ z / (r * math.sqrt(codebook.weights[k]))
        out[k, 1] = alpha[:, k] @ (z * z - 1.0) / (r * math.sqrt(2.0 * codebook.weights[k]))
    vec = out.reshape(-1)
    if improved:
        vec = np.sign(vec) * np.sqrt(np.abs(vec))
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
    return vec


def bow_encode(codebook: KMeansCodebook, pca: PcaModel | None, regions) -> np.ndarray:
    x = _project(pca, regions)
    hist = np.bincount(nearest_center(codebook, x), minlength=codebook.K).astype(np.float64)
    return hist / hist.sum()


def vlad_encode(codebook: KMeansCodebook, pca: PcaModel | None, regions) -> np.ndarray:
    x = _project(pca, regions)
    nearest = nearest_center(codebook, x)
    v = np.zeros((codebook.K, codebook.dim))
    np.add.at(v, nearest, x - codebook.centers[nearest])
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    total = np.linalg.norm(v)
    return (v / total if total > 0 else v).reshape(-1)


def encoded_dim(encoder: Encoder | str, k: int, dim: int) -> int:
    encoder = Encoder(encoder)
    return {Encoder.FISHER: 2 * k * dim, Encoder.BOW: k, Encoder.VLAD: k * dim}[encoder]


# ---------------------------------------------------------------------------
# Vocabulary = PCA + codebook, with persistence
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    encoder: Encoder
    pca: PcaModel
    model: GmmCodebook | KMeansCodebook
    meta: dict = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return encoded_dim(self.encoder, self.model.K, self.pca.dim)

    def encode(self, regions, improved: bool = False) -> np.ndarray:
        if self.encoder is Encoder.FISHER:
            return fisher_encode(self.model, self.pca, regions, improved)
        if self.encoder is Encoder.BOW:
            return bow_encode(self.model, self.pca, regions)
        return vlad_encode(self.model, self.pca, regions)


def pool_regions(sets: Sequence[DescriptorSet] | Sequence[np.ndarray], max_rows: int = MAX_POOL_ROWS, seed: int = 0) -> np.ndarray:
    """Stack all regions; subsample uniformly (seeded, order kept) above ``max_rows``."""
    mats = [s.regions if isinstance(s, DescriptorSet) else np.asarray(s) for s in sets]
    mats = [m for m in mats if len(m)]
    if not mats:
        raise NoDetectionsError("no regions to pool")
    x = np.concatenate(mats).astype(np.float64)
    if len(x) > max_rows:
        keep = np.sort(np.random.default_rng(seed).choice(len(x), size=max_rows, replace=False))
        x = x[keep]
    return x


def fit_vocabulary(
    sets,
    encoder: Encoder | str,
    pca_dim: int,
    words: int,
    seed: int = 0,
    max_rows: int = MAX_POOL_ROWS,
    modality: Modality | str | None = None,
) -> Vocabulary:
    encoder = Encoder(encoder)
    x = pool_regions(sets, max_rows, seed)
    pca = fit_pca(x, min(pca_dim, x.shape[1]))
    z = transform_pca(pca, x)
    model = fit_gmm(z, words, seed) if encoder is Encoder.FISHER else fit_kmeans(z, words, seed)
    meta = {
        "encoder": encoder.value,
        "pca_dim": pca.dim,
        "words": words,
        "seed": seed,
        "rows": int(len(x)),
        "modality": None if modality is None else Modality(modality).value,
    }
    return Vocabulary(encoder, pca, model, meta)


def save_vocabulary(path: str | Path, vocab: Vocabulary) -> None:
    arrays = {"pca_mean": vocab.pca.mean, "pca_basis": vocab.pca.basis, "pca_eig": vocab.pca.eigenvalues}
    if isinstance(vocab.model, GmmCodebook):
        arrays.update(weights=vocab.model.weights, means=vocab.model.means, variances=vocab.model.variances)
    else:
        arrays.update(centers=vocab.model.centers)
    meta = dict(vocab.meta, format=CODEBOOK_FORMAT, encoder=vocab.encoder.value)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_vocabulary(path: str | Path) -> Vocabulary:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CODEBOOK_FORMAT:
            raise ValueError(f"unsupported codebook format {meta.get('format')!r}")
        pca = PcaModel(data["pca_mean"], data["pca_basis"], data["pca_eig"])
        encoder = Encoder(meta["encoder"])
        if encoder is Encoder.FISHER:
            model = GmmCodebook(data["weights"], data["means"], data["variances"])
        else:
            model = KMeansCodebook(data["centers"])
    return Vocabulary(encoder, pca, model, meta)
