"""Localized multiple-kernel SVM/SVR with softmax gating.

Each modality r gets a whitened feature space, a base kernel K_r and a gate
eta_r(x) = softmax_r(<v_r, z_r(x)> + v_r0).  Training samples are combined
through K_eta[i, j] = sum_r eta_r(i) K_r[i, j] eta_r(j) and the machine
alternates between solving the SVM/SVR dual for fixed gates and a gradient
step on the gates for fixed dual variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

MODEL_FORMAT = 1
KKT_TOL = 1e-6
MAX_SMO_ITER = 100_000
EIG_FLOOR = 1e-8
C_GRID = (0.1, 1.0, 10.0, 100.0)
EPS_GRID = (0.05, 0.1, 0.2)


class KernelKind(str, Enum):
    LINEAR = "linear"
    GAUSSIAN = "gaussian"
    HI = "hi"


class Task(str, Enum):
    REGRESSION = "regression"
    BINARY = "binary"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.LINEAR
    s: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind is KernelKind.GAUSSIAN and not self.s > 0:
            raise ValueError("gaussian kernel needs s > 0")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"kernel inputs have dimensions {a.shape[1]} and {b.shape[1]}")
    if spec.kind is KernelKind.LINEAR:
        return a @ b.T
    if spec.kind is KernelKind.GAUSSIAN:
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-np.maximum(d2, 0.0) / spec.s**2)
    if (a < 0).any() or (b < 0).any():
        raise ValueError("histogram intersection kernel needs non-negative inputs")
    return _hi_kernel(a, b)


@numba.njit(cache=True)
def _hi_kernel(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            s = 0.0
            for k in range(a.shape[1]):
                s += min(a[i, k], b[j, k])
            out[i, j] = s
    return out


def hi_lift(z: np.ndarray) -> np.ndarray:
    """Split signed coordinates into non-negative parts [max(z, 0), max(-z, 0)]."""
    z = np.asarray(z, dtype=np.float64)
    return np.concatenate([np.maximum(z, 0.0), np.maximum(-z, 0.0)], axis=-1)


def modality_kernel(spec: KernelSpec, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    """Kernel between whitened features; HI is taken on the lifted coordinates."""
    if spec.kind is KernelKind.HI:
        return kernel_matrix(spec, hi_lift(za), hi_lift(zb))
    return kernel_matrix(spec, za, zb)


# ---------------------------------------------------------------------------
# Whitening and gating
# ---------------------------------------------------------------------------


@dataclass
class Whitener:
    mean: np.ndarray  # (d,)
    transform: np.ndarray | None  # (d, D_w): basis columns scaled by 1/sqrt(eigenvalue); None = identity

    @property
    def dim(self) -> int:
        return self.mean.shape[0] if self.transform is None else self.transform.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.mean.shape[0]:
            raise ValueError(f"feature dimension {x.shape[1]} does not match whitener {self.mean.shape[0]}")
        if self.transform is None:
            return x
        return (x - self.mean) @ self.transform


def whiten_fit(x: np.ndarray, dim: int) -> Whitener:
    """PCA whitening keeping at most ``dim`` components (and at most n - 1).

    ``dim = 0`` switches whitening off: the features pass through unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if dim == 0:
        return Whitener(np.zeros(d), None)
    if dim < 0:
        raise ValueError("whitening dimension must be non-negative")
    if n < 2:
        raise ValueError("whitening needs at least 2 rows")
    keep = max(1, min(dim, d, n - 1))
    mean = x.mean(axis=0)
    xc = x - mean
    if d <= n:
        vals, vecs = np.linalg.eigh(xc.T @ xc / (n - 1))
        order = np.argsort(vals)[::-1][:keep]
        vals, vecs = vals[order], vecs[:, order]
    else:
        # Gram trick: eigenvectors of X X^T map to those of X^T X
        gvals, gvecs = np.linalg.eigh(xc @ xc.T / (n - 1))
        order = np.argsort(gvals)[::-1][:keep]
        gvals, gvecs = gvals[order], gvecs[:, order]
        vecs = xc.T @ gvecs
        norms = np.linalg.norm(vecs, axis=0)
        vecs = vecs / np.where(norms > 0, norms, 1.0)
        vals = gvals
    big = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[big, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs
    return Whitener(mean, vecs / np.sqrt(np.maximum(vals, EIG_FLOOR)))


@dataclass
class GatingModel:
    v: list[np.ndarray]  # one weight vector per modality
    v0: np.ndarray  # (P,)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "GatingModel":
        return cls([np.zeros(d) for d in dims], np.zeros(len(dims)))

    @property
    def P(self) -> int:
        return len(self.v)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.v0] + list(self.v))

    @classmethod
    def from_flat(cls, theta: np.ndarray, dims: Sequence[int]) -> "GatingModel":
        p = len(dims)
        v0 = np.array(theta[:p], dtype=np.float64)
        v, off = [], p
        for d in dims:
            v.append(np.array(theta[off : off + d], dtype=np.float64))
            off += d
        return cls(v, v0)


def gating_logits(gating: GatingModel, zs: Sequence[np.ndarray]) -> np.ndarray:
    if len(zs) != gating.P:
        raise ValueError(f"expected {gating.P} modalities, got {len(zs)}")
    return np.stack([np.atleast_2d(z) @ v + v0 for z, v, v0 in zip(zs, gating.v, gating.v0)], axis=1)


def gating_eval(gating: GatingModel, zs: Sequence[np.ndarray]) -> np.ndarray:
    """Softmax gates, shape (n, P), rows summing to one."""
    logits = gating_logits(gating, zs)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def combined_kernel(kernels: Sequence[np.ndarray], eta_a: np.ndarray, eta_b: np.ndarray | None = None) -> np.ndarray:
    """sum_r eta_a[:, r] K_r eta_b[:, r]; ``eta_b`` defaults to ``eta_a``."""
    if eta_b is None:
        eta_b = eta_a
    shape = kernels[0].shape
    if any(k.shape != shape for k in kernels):
        raise ValueError("kernel matrices differ in shape")
    if eta_a.shape != (shape[0], len(kernels)) or eta_b.shape != (shape[1], len(kernels)):
        raise ValueError("gating shape does not match kernels")
    out = np.zeros(shape)
    for r, k in enumerate(kernels):
        out += eta_a[:, r : r + 1] * k * eta_b[None, :, r]
    return out


# ---------------------------------------------------------------------------
# Dual solver
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _smo(Q, p, z, C, beta, tol, max_iter):
    """Minimise 0.5 b'Qb + p'b  s.t. z'b = const, 0 <= b <= C, with z in {-1, +1}.

    Q must already carry the z_i z_j signs.  Working pairs are chosen by the
    maximal violation with second-order gain; ``beta`` is updated in place.
    Returns (iterations, rho).
    """
    n = len(p)
    tau = 1e-12
    grad = Q @ beta + p
    diag = np.diag(Q).copy()
    it = 0
    while it < max_iter:
        gmax = -np.inf
        i = -1
        for t in range(n):
            if z[t] > 0:
                if beta[t] < C and -grad[t] >= gmax:
                    gmax = -grad[t]
                    i = t
            else:
                if beta[t] > 0 and grad[t] >= gmax:
                    gmax = grad[t]
                    i = t
        gmax2 = -np.inf
        j = -1
        best = np.inf
        qi_sel = Q[max(i, 0)]
        for t in range(n):
            if z[t] > 0:
                if beta[t] > 0:
                    diff = gmax + grad[t]
                    if grad[t] >= gmax2:
                        gmax2 = grad[t]
                    if i >= 0 and diff > 0:
                        quad = Q[i, i] + diag[t] - 2.0 * z[i] * qi_sel[t]
                        gain = -(diff * diff) / (quad if quad > 0 else tau)
                        if gain <= best:
                            best = gain
                            j = t
            else:
                if beta[t] < C:
                    diff = gmax - grad[t]
                    if -grad[t] >= gmax2:
                        gmax2 = -grad[t]
                    if i >= 0 and diff > 0:
                        quad = Q[i, i] + diag[t] + 2.0 * z[i] * qi_sel[t]
                        gain = -(diff * diff) / (quad if quad > 0 else tau)
                        if gain <= best:
                            best = gain
                            j = t
        if gmax + gmax2 < tol or i < 0 or j < 0:
            break
        it += 1
        old_i = beta[i]
        old_j = beta[j]
        if z[i] != z[j]:
            quad = Q[i, i] + Q[j, j] + 2.0 * Q[i, j]
            if quad <= 0:
                quad = tau
            delta = (-grad[i] - grad[j]) / quad
            diff = beta[i] - beta[j]
            beta[i] += delta
            beta[j] += delta
            if diff > 0:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = diff
            else:
                if beta[i] < 0:
                    beta[i] = 0.0
                    beta[j] = -diff
            if diff > 0:
                if beta[i] > C:
                    beta[i] = C
                    beta[j] = C - diff
            else:
                if beta[j] > C:
                    beta[j] = C
                    beta[i] = C + diff
        else:
            quad = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
            if quad <= 0:
                quad = tau
            delta = (grad[i] - grad[j]) / quad
            total = beta[i] + beta[j]
            beta[i] -= delta
            beta[j] += delta
            if total > C:
                if beta[i] > C:
                    beta[i] = C
                    beta[j] = total - C
            else:
                if beta[j] < 0:
                    beta[j] = 0.0
                    beta[i] = total
            if total > C:
                if beta[j] > C:
                    beta[j] = C
                    beta[i] = total - C
            else:
                if beta[i] < 0:
                    beta[i] = 0.0
                    beta[j] = total
        di = beta[i] - old_i
        dj = beta[j] - old_j
        qi = Q[i]
        qj = Q[j]
        for t in range(n):
            grad[t] += qi[t] * di + qj[t] * dj

    # offset: average over free variables, else midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    free = 0
    acc = 0.0
    for t in range(n):
        yg = z[t] * grad[t]
        if beta[t] >= C:
            if z[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif beta[t] <= 0:
            if z[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            free += 1
            acc += yg
    rho = acc / free if free > 0 else (ub + lb) / 2.0
    return it, rho


@dataclass
class DualSolution:
    coef: np.ndarray  # signed expansion coefficients a_i (alpha_i y_i, or alpha+_i - alpha-_i)
    b: float
    objective: float  # dual objective J (maximisation form)
    alpha: np.ndarray  # alpha (SVC) or concatenated [alpha+, alpha-] (SVR)
    iterations: int


def _check_kernel(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("kernel matrix must be square")
    if not np.allclose(k, k.T, rtol=0, atol=1e-9 * max(1.0, np.abs(k).max())):
        raise ValueError("kernel matrix is not symmetric")
    return 0.5 * (k + k.T)


def svc_objective(k: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    a = alpha * y
    return float(alpha.sum() - 0.5 * a @ k @ a)


def svr_objective(k: np.ndarray, y: np.ndarray, alpha_pos: np.ndarray, alpha_neg: np.ndarray, eps: float) -> float:
    beta = alpha_pos - alpha_neg
    return float(-0.5 * beta @ k @ beta - eps * (alpha_pos + alpha_neg).sum() + y @ beta)


def solve_svc_dual(k: np.ndarray, y: np.ndarray, C: float, tol: float = KKT_TOL, max_iter: int = MAX_SMO_ITER, init: np.ndarray | None = None) -> DualSolution:
    k = _check_kernel(k)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.abs(y) == 1):
        raise ValueError("SVC labels must be -1 or +1")
    q = k * np.outer(y, y)
    alpha = np.zeros(len(y)) if init is None else np.clip(np.array(init, dtype=np.float64), 0.0, C)
    it, rho = _smo(q, -np.ones(len(y)), y, float(C), alpha, tol, max_iter)
    return DualSolution(alpha * y, -rho, svc_objective(k, y, alpha), alpha, it)


def solve_svr_dual(k: np.ndarray, y: np.ndarray, C: float, eps: float, tol: float = KKT_TOL, max_iter: int = MAX_SMO_ITER, init: np.ndarray | None = None) -> DualSolution:
    k = _check_kernel(k)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    z = np.concatenate([np.ones(n), -np.ones(n)])
    q = np.block([[k, -k], [-k, k]])
    p = np.concatenate([eps - y, eps + y])
    beta = np.zeros(2 * n) if init is None else np.clip(np.array(init, dtype=np.float64), 0.0, C)
    it, rho = _smo(q, p, z, float(C), beta, tol, max_iter)
    ap, an = beta[:n], beta[n:]
    return DualSolution(ap - an, -rho, svr_objective(k, y, ap, an, eps), beta, it)


def solve_dual(task: Task, k, y, C, eps, init=None, tol: float = KKT_TOL) -> DualSolution:
    if Task(task) is Task.BINARY:
        return solve_svc_dual(k, y, C, tol=tol, init=init)
    return solve_svr_dual(k, y, C, eps, tol=tol, init=init)


# ---------------------------------------------------------------------------
# Gating gradient
# ---------------------------------------------------------------------------


def gating_gradient(kernels: Sequence[np.ndarray], zs: Sequence[np.ndarray], gating: GatingModel, coef: np.ndarray) -> GatingModel:
    """Gradient of the dual objective with respect to the gating parameters, dual variables fixed.

    Only the quadratic term -0.5 a' K_eta a depends on the gates.  With
    G_r(i) = a_i eta_r(i) sum_j K_r[i, j] eta_r(j) a_j the derivative with
    respect to logit k of sample i is -(G_k(i) - eta_k(i) sum_r G_r(i)).
    """
    eta = gating_eval(gating, zs)
    g = np.stack([coef * eta[:, r] * (k @ (eta[:, r] * coef)) for r, k in enumerate(kernels)], axis=1)
    dlogit = -(g - eta * g.sum(axis=1, keepdims=True))  # (n, P)
    return GatingModel([z.T @ dlogit[:, r] for r, z in enumerate(zs)], dlogit.sum(axis=0))


def gated_objective(task: Task, kernels, zs, gating: GatingModel, sol: DualSolution, y, eps) -> float:
    """Dual objective evaluated at fixed dual variables for the given gates."""
    k = combined_kernel(kernels, gating_eval(gating, zs))
    if Task(task) is Task.BINARY:
        return svc_objective(k, y, sol.alpha)
    n = len(y)
    return svr_objective(k, y, sol.alpha[:n], sol.alpha[n:], eps)


# ---------------------------------------------------------------------------
# Fusion model
# ---------------------------------------------------------------------------


@dataclass
class FusionModel:
    task: Task
    kernels: list[KernelSpec]
    whiteners: list[Whitener]
    gating: GatingModel
    support: list[np.ndarray]  # whitened training features per modality
    coef: np.ndarray
    b: float
    C: float
    eps: float
    y: np.ndarray
    objective_trace: list[float] = field(default_factory=list)

    @property
    def P(self) -> int:
        return len(self.kernels)

    def training_gates(self) -> np.ndarray:
        return gating_eval(self.gating, self.support)


@dataclass
class FitOptions:
    whiten_dim: int = 32
    lr: float = 0.1
    armijo_c: float = 1e-4
    max_halvings: int = 20
    rel_tol: float = 1e-4
    max_outer: int = 50
    learn_gating: bool = True
    tol: float = KKT_TOL


def _check_features(features: Sequence[np.ndarray]) -> list[np.ndarray]:
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    if not feats:
        raise ValueError("need at least one modality")
    n = len(feats[0])
    if any(len(f) != n for f in feats):
        raise ValueError("modalities have different sample counts")
    if n < 2:
        raise ValueError("need at least 2 training samples")
    return feats


def fit_rlmkl(
    features: Sequence[np.ndarray],
    y: np.ndarray,
    task: Task | str,
    kernels: Sequence[KernelSpec],
    C: float = 1.0,
    eps: float = 0.1,
    seed: int = 0,
    options: FitOptions = FitOptions(),
) -> FusionModel:
    """Alternate dual solves and Armijo-controlled gradient steps on the gates.

    The gates start uniform.  Each outer step descends the dual optimum J in
    the gating parameters; a trial step is accepted once the re-solved J drops
    by at least ``armijo_c * step * |grad|^2``, otherwise the step is halved.
    ``objective_trace`` holds J after every accepted step.  ``seed`` is kept
    for interface symmetry; the procedure itself is deterministic.
    """
    task = Task(task)
    feats = _check_features(features)
    if len(kernels) != len(feats):
        raise ValueError("one kernel spec per modality required")
    y = np.asarray(y, dtype=np.float64)
    if len(y) != len(feats[0]):
        raise ValueError("label count does not match samples")
    if task is Task.BINARY:
        if not np.all(np.abs(y) == 1):
            raise ValueError("binary labels must be -1 or +1")
        if len(np.unique(y)) < 2:
            raise ValueError("binary task needs both classes")

    whiteners = [whiten_fit(f, options.whiten_dim) for f in feats]
    zs = [w.apply(f) for w, f in zip(whiteners, feats)]
    kms = [modality_kernel(spec, z, z) for spec, z in zip(kernels, zs)]
    dims = [z.shape[1] for z in zs]
    gating = GatingModel.zeros(dims)

    def solve(g, init=None):
        return solve_dual(task, combined_kernel(kms, gating_eval(g, zs)), y, C, eps, init, options.tol)

    sol = solve(gating)
    trace = [sol.objective]
    step = options.lr
    if options.learn_gating and len(feats) > 1:
        for _ in range(options.max_outer):
            grad = gating_gradient(kms, zs, gating, sol.coef).flat()
            gnorm2 = float(grad @ grad)
            if gnorm2 == 0.0:
                break
            theta = gating.flat()
            step = min(2.0 * step, options.lr)
            accepted = None
            for _ in range(options.max_halvings):
                trial = GatingModel.from_flat(theta - step * grad, dims)
                trial_sol = solve(trial, sol.alpha)
                if trial_sol.objective <= sol.objective - options.armijo_c * step * gnorm2:
                    accepted = (trial, trial_sol)
                    break
                step *= 0.5
            if accepted is None:
                break
            prev = sol.objective
            gating, sol = accepted
            trace.append(sol.objective)
            if abs(prev - sol.objective) < options.rel_tol * max(abs(prev), 1e-12):
                break

    return FusionModel(task, list(kernels), whiteners, gating, zs, sol.coef, sol.b, C, eps, y, trace)


def decision_function(model: FusionModel, features: Sequence[np.ndarray]) -> np.ndarray:
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    if len(feats) != model.P:
        raise ValueError(f"model expects {model.P} modalities, got {len(feats)}")
    zs = [w.apply(f) for w, f in zip(model.whiteners, feats)]
    eta = gating_eval(model.gating, zs)
    eta_sv = gating_eval(model.gating, model.support)
    ks = [modality_kernel(spec, z, sv) for spec, z, sv in zip(model.kernels, zs, model.support)]
    return combined_kernel(ks, eta, eta_sv) @ model.coef + model.b


def predict_rlmkl(model: FusionModel, features: Sequence[np.ndarray]) -> np.ndarray:
    f = decision_function(model, features)
    if model.task is Task.BINARY:
        return np.where(f >= 0, 1.0, -1.0)
    return f


# ---------------------------------------------------------------------------
# One-vs-one
# ---------------------------------------------------------------------------


@dataclass
class OvoModel:
    classes: list[int]
    pairs: list[tuple[int, int]]
    machines: list[FusionModel]


def ovo_fit(features, labels, kernels, C=1.0, seed=0, options: FitOptions = FitOptions(), n_classes: int | None = None) -> OvoModel:
    """One binary machine per class pair (a < b); +1 stands for class a."""
    feats = _check_features(features)
    labels = np.asarray(labels).astype(np.int64)
    classes = sorted(set(labels.tolist())) if n_classes is None else list(range(n_classes))
    present = set(labels.tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"classes {missing} absent from training data")
    if len(classes) < 2:
        raise ValueError("one-vs-one needs at least 2 classes")
    pairs, machines = [], []
    for a, b in combinations(classes, 2):
        sel = (labels == a) | (labels == b)
        yy = np.where(labels[sel] == a, 1.0, -1.0)
        machines.append(fit_rlmkl([f[sel] for f in feats], yy, Task.BINARY, kernels, C, 0.0, seed, options))
        pairs.append((a, b))
    return OvoModel(classes, pairs, machines)


def ovo_predict(model: OvoModel, features) -> np.ndarray:
    """Majority vote; ties go to the larger summed margin, then the lowest class id."""
    feats = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    n = len(feats[0])
    index = {c: i for i, c in enumerate(model.classes)}
    votes = np.zeros((n, len(model.classes)))
    margins = np.zeros((n, len(model.classes)))
    for (a, b), m in zip(model.pairs, model.machines):
        f = decision_function(m, feats)
        votes[:, index[a]] += f >= 0
        votes[:, index[b]] += f < 0
        margins[:, index[a]] += f
        margins[:, index[b]] -= f
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        top = np.flatnonzero(votes[i] == votes[i].max())
        if len(top) > 1:
            best = margins[i, top].max()
            top = top[margins[i, top] == best]
        out[i] = model.classes[int(top[0])]
    return out


# ---------------------------------------------------------------------------
# Hyperparameter selection
# ---------------------------------------------------------------------------


def _inner_folds(n: int, k: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    assign[perm] = np.arange(n) % k
    return assign


def select_hyperparameters(
    features,
    y,
    task: str,
    kernels: Sequence[KernelSpec],
    c_grid: Sequence[float] = C_GRID,
    eps_grid: Sequence[float] = EPS_GRID,
    folds: int = 10,
    seed: int = 0,
    options: FitOptions = FitOptions(),
) -> tuple[float, float]:
    """Pick (C, eps) by inner k-fold CV with uniform gates.

    ``task`` is "regression" (score: MAE, lower wins) or "ovo" (score:
    accuracy, higher wins; eps is not used and returned as the first grid
    value).  Ties keep the earlier grid point.
    """
    feats = _check_features(features)
    y = np.asarray(y)
    n = len(y)
    k = max(2, min(folds, n))
    assign = _inner_folds(n, k, seed)
    uniform = FitOptions(**{**options.__dict__, "learn_gating": False})
    eps_values = list(eps_grid) if task == "regression" else [eps_grid[0]]
    best, best_score = None, None
    for C in c_grid:
        for eps in eps_values:
            errs = []
            for f in range(k):
                tr, te = assign != f, assign == f
                if task == "regression":
                    m = fit_rlmkl([x[tr] for x in feats], y[tr], Task.REGRESSION, kernels, C, eps, seed, uniform)
                    pred = np.clip(decision_function(m, [x[te] for x in feats]), 0.0, 5.0)
                    errs.append(np.abs(pred - y[te]).sum())
                else:
                    labels_tr = y[tr].astype(np.int64)
                    if len(np.unique(labels_tr)) < 2:
                        continue
                    m = ovo_fit([x[tr] for x in feats], labels_tr, kernels, C, seed, uniform)
                    errs.append(-(ovo_predict(m, [x[te] for x in feats]) == y[te]).sum())
            score = float(np.sum(errs))
            if best_score is None or score < best_score:
                best, best_score = (float(C), float(eps)), score
    return best


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _model_arrays(prefix: str, m: FusionModel) -> tuple[dict, dict]:
    arrays = {f"{prefix}coef": m.coef, f"{prefix}y": m.y, f"{prefix}gate_bias": m.gating.v0}
    for r in range(m.P):
        arrays[f"{prefix}w{r}_mean"] = m.whiteners[r].mean
        if m.whiteners[r].transform is not None:
            arrays[f"{prefix}w{r}_transform"] = m.whiteners[r].transform
        arrays[f"{prefix}gate{r}"] = m.gating.v[r]
        arrays[f"{prefix}sv{r}"] = m.support[r]
    meta = {
        "task": m.task.value,
        "kernels": [{"kind": k.kind.value, "s": k.s} for k in m.kernels],
        "b": m.b,
        "C": m.C,
        "eps": m.eps,
        "objective_trace": list(m.objective_trace),
    }
    return arrays, meta


def _model_from(prefix: str, data, meta: dict) -> FusionModel:
    kernels = [KernelSpec(KernelKind(k["kind"]), k["s"]) for k in meta["kernels"]]
    p = len(kernels)
    whiteners = []
    for r in range(p):
        key = f"{prefix}w{r}_transform"
        whiteners.append(Whitener(data[f"{prefix}w{r}_mean"], data[key] if key in data.files else None))
    gating = GatingModel([data[f"{prefix}gate{r}"] for r in range(p)], data[f"{prefix}gate_bias"])
    support = [data[f"{prefix}sv{r}"] for r in range(p)]
    return FusionModel(
        Task(meta["task"]), kernels, whiteners, gating, support, data[f"{prefix}coef"],
        meta["b"], meta["C"], meta["eps"], data[f"{prefix}y"], meta["objective_trace"],
    )


def save_model(path: str | Path, model: FusionModel | OvoModel, extra: dict | None = None, extra_arrays: dict | None = None) -> None:
    """Write a model as npz; ``extra`` is JSON metadata, ``extra_arrays`` named arrays kept alongside."""
    arrays: dict = {f"extra_{k}": np.asarray(v) for k, v in (extra_arrays or {}).items()}
    if isinstance(model, OvoModel):
        metas = []
        for i, m in enumerate(model.machines):
            a, meta = _model_arrays(f"m{i}_", m)
            arrays.update(a)
            metas.append(meta)
        meta = {"kind": "ovo", "classes": model.classes, "pairs": model.pairs, "machines": metas}
    else:
        a, meta = _model_arrays("", model)
        arrays.update(a)
        meta["kind"] = "single"
    meta["format"] = MODEL_FORMAT
    meta["extra"] = extra or {}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> tuple[FusionModel | OvoModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {meta.get('format')!r}")
        if meta["kind"] == "ovo":
            machines = [_model_from(f"m{i}_", data, mm) for i, mm in enumerate(meta["machines"])]
            model = OvoModel(meta["classes"], [tuple(p) for p in meta["pairs"]], machines)
        else:
            model = _model_from("", data, meta)
        extra = dict(meta.get("extra", {}))
        named = {k[len("extra_"):]: data[k] for k in data.files if k.startswith("extra_")}
        if named:
            extra["arrays"] = named
    return model, extra
