import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupaffect.rlmkl import (
    FitOptions,
    GatingModel,
    KernelKind,
    KernelSpec,
    OvoModel,
    Task,
    combined_kernel,
    decision_function,
    fit_rlmkl,
    gated_objective,
    gating_eval,
    gating_gradient,
    hi_lift,
    kernel_matrix,
    load_model,
    modality_kernel,
    ovo_fit,
    ovo_predict,
    predict_rlmkl,
    save_model,
    select_hyperparameters,
    solve_dual,
    solve_svc_dual,
    solve_svr_dual,
    whiten_fit,
)

from .instances import dual_instance, gating_instance
from .oracles import qp_dual, svc_kkt_violation, svr_kkt_violation

LINEAR = KernelSpec(KernelKind.LINEAR)


# kernels -------------------------------------------------------------------


def test_kernel_examples():
    a = np.array([[1.0, 2.0], [0.0, 1.0]])
    b = np.array([[1.0, 0.0]])
    assert np.allclose(kernel_matrix(LINEAR, a, b), [[1.0], [0.0]])
    g = kernel_matrix(KernelSpec("gaussian", 2.0), a, b)
    assert np.allclose(g, np.exp(-np.array([[4.0], [2.0]]) / 4.0))
    assert np.allclose(kernel_matrix(KernelSpec("hi"), a, b), [[1.0], [0.0]])
    with pytest.raises(ValueError):
        kernel_matrix(KernelSpec("hi"), -a, b)
    with pytest.raises(ValueError):
        KernelSpec("gaussian", 0.0)


def test_hi_lift_splits_signs():
    assert np.array_equal(hi_lift(np.array([[1.5, -2.0]])), [[1.5, 0.0, 0.0, 2.0]])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["linear", "gaussian", "hi"]))
def test_modality_kernels_psd(seed, kind):
    z = np.random.default_rng(seed).normal(size=(9, 4))
    k = modality_kernel(KernelSpec(kind, 1.5), z, z)
    assert np.min(np.linalg.eigvalsh(k)) >= -1e-9 * max(1.0, np.abs(k).max())


def test_combined_kernel_psd_over_100_inputs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        kernels, zs, gating = gating_instance(rng, int(rng.integers(1, 4)))
        k = combined_kernel(kernels, gating_eval(gating, zs))
        assert np.allclose(k, k.T)
        assert np.min(np.linalg.eigvalsh(k)) >= -1e-9


def test_gates_sum_to_one():
    rng = np.random.default_rng(1)
    _, zs, gating = gating_instance(rng, 3)
    eta = gating_eval(gating, zs)
    assert np.allclose(eta.sum(axis=1), 1.0) and np.all(eta > 0)
    assert np.allclose(gating_eval(GatingModel.zeros([z.shape[1] for z in zs]), zs), 1 / 3)


def test_gating_flat_round_trip():
    g = GatingModel([np.array([1.0, 2.0]), np.array([3.0])], np.array([4.0, 5.0]))
    back = GatingModel.from_flat(g.flat(), [2, 1])
    assert np.array_equal(back.flat(), g.flat())


# whitening ---------------------------------------------------------------


def test_whitened_covariance_is_identity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 6)) @ rng.normal(size=(6, 6)) + 3.0
    z = whiten_fit(x, 6).apply(x)
    assert np.max(np.abs(np.cov(z, rowvar=False) - np.eye(6))) <= 1e-6
    assert np.allclose(z.mean(axis=0), 0, atol=1e-10)


def test_whitening_eig_oracle_and_gram_route():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 10))
    w = whiten_fit(x, 4)
    vals, vecs = np.linalg.eig(np.cov(x, rowvar=False))
    order = np.argsort(vals.real)[::-1][:4]
    basis = w.transform * np.sqrt(vals.real[order])
    for j, i in enumerate(order):
        assert abs(abs(basis[:, j] @ vecs[:, i].real) - 1) <= 1e-8
    wide = rng.normal(size=(12, 40))
    zw = whiten_fit(wide, 32).apply(wide)
    assert zw.shape == (12, 11)
    assert np.max(np.abs(np.cov(zw, rowvar=False) - np.eye(11))) <= 1e-6


# dual solvers ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_svc_matches_qp(seed):
    rng = np.random.default_rng(seed)
    k, y, C, _ = dual_instance(rng, "svc")
    sol = solve_svc_dual(k, y, C)
    coef, obj = qp_dual(k, y, C)
    assert abs(sol.objective - obj) <= 1e-6
    assert np.max(np.abs(sol.coef - coef)) <= 1e-4
    assert svc_kkt_violation(k, y, sol.alpha, sol.b, C) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_svr_matches_qp(seed):
    rng = np.random.default_rng(100 + seed)
    k, y, C, eps = dual_instance(rng, "svr")
    sol = solve_svr_dual(k, y, C, eps)
    coef, obj = qp_dual(k, y, C, eps)
    n = len(y)
    assert abs(sol.objective - obj) <= 1e-6
    assert np.max(np.abs(sol.coef - coef)) <= 1e-4
    assert svr_kkt_violation(k, y, sol.alpha[:n], sol.alpha[n:], sol.b, C, eps) <= 1e-4


def test_svc_two_points():
    x = np.array([[1.0], [-1.0]])
    sol = solve_svc_dual(kernel_matrix(LINEAR, x, x), np.array([1.0, -1.0]), C=10.0)
    assert np.allclose(sol.alpha, [0.5, 0.5], atol=1e-6)
    assert abs(sol.b) <= 1e-6


def test_svr_fits_identity_line():
    x = np.array([[-1.0], [0.0], [1.0]])
    y = x[:, 0]
    sol = solve_svr_dual(kernel_matrix(LINEAR, x, x), y, C=100.0, eps=0.1)
    pred = kernel_matrix(LINEAR, x, x) @ sol.coef + sol.b
    assert np.max(np.abs(pred - y)) <= 0.1 + 1e-6


def test_svr_constant_target():
    x = np.random.default_rng(4).normal(size=(6, 2))
    sol = solve_svr_dual(kernel_matrix(LINEAR, x, x), np.full(6, 2.5), C=1.0, eps=0.1)
    assert np.all(sol.alpha == 0)
    assert sol.b == pytest.approx(2.5, abs=0.1)


def test_solver_input_checks():
    with pytest.raises(ValueError):
        solve_svc_dual(np.eye(2), np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        solve_svc_dual(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, -1.0]), 1.0)
    with pytest.raises(ValueError):
        solve_svr_dual(np.ones((2, 3)), np.zeros(2), 1.0, 0.1)


# gating gradient ---------------------------------------------------------


def _fd_gradient(task, kernels, zs, gating, sol, y, eps, h=1e-5):
    dims = [z.shape[1] for z in zs]
    theta = gating.flat()
    out = np.empty_like(theta)
    for i in range(len(theta)):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fu = gated_objective(task, kernels, zs, GatingModel.from_flat(up, dims), sol, y, eps)
        fd = gated_objective(task, kernels, zs, GatingModel.from_flat(dn, dims), sol, y, eps)
        out[i] = (fu - fd) / (2 * h)
    return out


@pytest.mark.parametrize("p", [2, 3])
@pytest.mark.parametrize("task", [Task.BINARY, Task.REGRESSION])
def test_gating_gradient_matches_finite_differences(p, task):
    rng = np.random.default_rng(10 * p + (task is Task.BINARY))
    for _ in range(20):
        kernels, zs, gating = gating_instance(rng, p)
        n = len(zs[0])
        y = np.where(rng.random(n) < 0.5, -1.0, 1.0) if task is Task.BINARY else rng.normal(size=n)
        sol = solve_dual(task, combined_kernel(kernels, gating_eval(gating, zs)), y, 1.0, 0.1)
        grad = gating_gradient(kernels, zs, gating, sol.coef).flat()
        fd = _fd_gradient(task, kernels, zs, gating, sol, y, 0.1)
        if np.linalg.norm(fd) < 1e-8:
            continue
        assert np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd)


# fusion machine ----------------------------------------------------------


def _regression_data(rng, n=40):
    x1 = rng.normal(size=(n, 5))
    x2 = rng.normal(size=(n, 3))
    y = x1[:, 0] - 0.5 * x1[:, 1] + 0.1 * rng.normal(size=n) + 2.0
    return [x1, x2], y


def test_single_modality_equals_plain_machine():
    rng = np.random.default_rng(20)
    (x1, _), y = _regression_data(rng)
    for spec in (LINEAR, KernelSpec("gaussian", 3.0)):
        model = fit_rlmkl([x1], y, "regression", [spec], C=1.0, eps=0.1)
        z = model.whiteners[0].apply(x1)
        sol = solve_svr_dual(modality_kernel(spec, z, z), y, 1.0, 0.1)
        test = rng.normal(size=(7, 5))
        zt = model.whiteners[0].apply(test)
        want = modality_kernel(spec, zt, z) @ sol.coef + sol.b
        assert np.max(np.abs(decision_function(model, [test]) - want)) <= 1e-6
        assert np.allclose(model.training_gates(), 1.0)


def test_uniform_gates_equal_averaged_kernel():
    rng = np.random.default_rng(21)
    feats, y = _regression_data(rng)
    kernels = [LINEAR, KernelSpec("gaussian", 2.0)]
    model = fit_rlmkl(feats, y, "regression", kernels, options=FitOptions(learn_gating=False))
    zs = [w.apply(f) for w, f in zip(model.whiteners, feats)]
    kavg = sum(modality_kernel(s, z, z) for s, z in zip(kernels, zs)) / 4.0  # eta = 1/2 on both sides
    sol = solve_svr_dual(kavg, y, 1.0, 0.1)
    test = [rng.normal(size=(5, 5)), rng.normal(size=(5, 3))]
    zt = [w.apply(f) for w, f in zip(model.whiteners, test)]
    want = sum(modality_kernel(s, a, b) for s, a, b in zip(kernels, zt, zs)) / 4.0 @ sol.coef + sol.b
    assert np.max(np.abs(decision_function(model, test) - want)) <= 1e-6


def test_objective_trace_non_increasing():
    rng = np.random.default_rng(22)
    feats, y = _regression_data(rng)
    model = fit_rlmkl(feats, y, "regression", [LINEAR, LINEAR], C=1.0, eps=0.1)
    assert len(model.objective_trace) >= 2
    assert np.all(np.diff(model.objective_trace) <= 1e-12)


def test_gates_favour_the_informative_modality():
    rng = np.random.default_rng(23)
    n = 60
    signal = rng.normal(size=(n, 4))
    noise = rng.normal(size=(n, 4))
    y = 2.0 * signal[:, 0] + signal[:, 1] + 2.5
    model = fit_rlmkl([signal, noise], y, "regression", [LINEAR, LINEAR], C=1.0, eps=0.1)
    assert model.training_gates()[:, 0].mean() > 0.5


def test_decision_function_matches_loop_reevaluation():
    rng = np.random.default_rng(27)
    feats, y = _regression_data(rng, 30)
    kernels = [KernelSpec("gaussian", 3.0), LINEAR]
    model = fit_rlmkl(feats, y, "regression", kernels, C=1.0, eps=0.1, options=FitOptions(whiten_dim=3))
    test = [rng.normal(size=(4, 5)), rng.normal(size=(4, 3))]

    def whiten(w, x):
        return (x - w.mean) @ w.transform

    def gates(zs):
        logits = np.array([zs[r] @ model.gating.v[r] + model.gating.v0[r] for r in range(2)])
        e = np.exp(logits)
        return e / e.sum()

    def k(spec, a, b):
        if spec.kind is KernelKind.LINEAR:
            return float(sum(p * q for p, q in zip(a, b)))
        return float(np.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / spec.s**2))

    sv = [whiten(w, f) for w, f in zip(model.whiteners, feats)]
    for i in range(4):
        zt = [whiten(w, t[i]) for w, t in zip(model.whiteners, test)]
        et = gates(zt)
        total = model.b
        for j in range(len(y)):
            zj = [sv[r][j] for r in range(2)]
            ej = gates(zj)
            total += model.coef[j] * sum(et[r] * ej[r] * k(kernels[r], zt[r], zj[r]) for r in range(2))
        assert decision_function(model, [t[i : i + 1] for t in test])[0] == pytest.approx(total, abs=1e-10)


@pytest.mark.parametrize("task", ["regression", "binary"])
def test_trained_model_satisfies_dual_constraints(task):
    rng = np.random.default_rng(28)
    feats, y = _regression_data(rng, 30)
    if task == "binary":
        y = np.where(y > np.median(y), 1.0, -1.0)
    model = fit_rlmkl(feats, y, task, [LINEAR, LINEAR], C=0.5, eps=0.1)
    assert abs(model.coef.sum()) <= 1e-6
    if task == "binary":
        alpha = model.coef * y
        assert alpha.min() >= -1e-6 and alpha.max() <= 0.5 + 1e-6
    else:
        assert np.abs(model.coef).max() <= 0.5 + 1e-6


def test_fit_is_deterministic():
    rng = np.random.default_rng(24)
    feats, y = _regression_data(rng)
    a = fit_rlmkl(feats, y, "regression", [LINEAR, LINEAR])
    b = fit_rlmkl([f.copy() for f in feats], y.copy(), "regression", [LINEAR, LINEAR])
    assert np.array_equal(a.coef, b.coef) and a.objective_trace == b.objective_trace


def test_fit_input_checks():
    rng = np.random.default_rng(25)
    feats, y = _regression_data(rng, 10)
    with pytest.raises(ValueError):
        fit_rlmkl(feats, y, "regression", [LINEAR])
    with pytest.raises(ValueError):
        fit_rlmkl([feats[0], feats[1][:5]], y, "regression", [LINEAR, LINEAR])
    with pytest.raises(ValueError):
        fit_rlmkl(feats, np.ones(10), "binary", [LINEAR, LINEAR])
    with pytest.raises(ValueError):
        decision_function(fit_rlmkl(feats, y, "regression", [LINEAR, LINEAR]), feats[:1])


def test_binary_fit_separates():
    rng = np.random.default_rng(26)
    x = np.concatenate([rng.normal(-2, 0.5, size=(20, 2)), rng.normal(2, 0.5, size=(20, 2))])
    y = np.r_[-np.ones(20), np.ones(20)]
    model = fit_rlmkl([x], y, "binary", [LINEAR], C=1.0)
    assert np.array_equal(predict_rlmkl(model, [x]), y)


# one-vs-one --------------------------------------------------------------


def _three_classes(rng, per=12):
    centres = np.array([[0.0, 4.0], [4.0, 0.0], [-4.0, -4.0]])
    labels = np.repeat(np.arange(3), per)
    return centres[labels] + rng.normal(scale=0.7, size=(len(labels), 2)), labels


def test_ovo_separates_three_classes():
    rng = np.random.default_rng(27)
    x, labels = _three_classes(rng)
    model = ovo_fit([x], labels, [LINEAR])
    assert len(model.machines) == 3 and model.pairs == [(0, 1), (0, 2), (1, 2)]
    assert np.mean(ovo_predict(model, [x]) == labels) >= 0.95


def test_ovo_two_classes_is_one_binary_machine():
    rng = np.random.default_rng(28)
    x, labels = _three_classes(rng)
    keep = labels < 2
    model = ovo_fit([x[keep]], labels[keep], [LINEAR])
    binary = fit_rlmkl([x[keep]], np.where(labels[keep] == 0, 1.0, -1.0), "binary", [LINEAR], 1.0, 0.0)
    f = decision_function(binary, [x])
    assert np.array_equal(ovo_predict(model, [x]), np.where(f >= 0, 0, 1))


def test_ovo_missing_class_raises():
    rng = np.random.default_rng(29)
    x, labels = _three_classes(rng)
    with pytest.raises(ValueError, match="absent"):
        ovo_fit([x], labels, [LINEAR], n_classes=4)


def test_ovo_tie_breaks_by_margin():
    # a hand-built model where every class gets one vote
    base = fit_rlmkl([np.array([[1.0], [-1.0]])], np.array([1.0, -1.0]), "binary", [LINEAR], C=10.0)
    machines = []
    for b in (0.0, 0.5, -0.5):
        m = fit_rlmkl([np.array([[1.0], [-1.0]])], np.array([1.0, -1.0]), "binary", [LINEAR], C=10.0)
        m.coef = np.zeros_like(base.coef)
        m.b = b
        machines.append(m)
    # pair (0,1): f=0 -> vote 0; (0,2): f=0.5 -> vote 0; (1,2): f=-0.5 -> vote 2
    model = OvoModel([0, 1, 2], [(0, 1), (0, 2), (1, 2)], machines)
    assert ovo_predict(model, [np.zeros((1, 1))])[0] == 0
    machines[1].b = -0.5  # now 0, 2 and 2 again: class 2 wins with two votes
    assert ovo_predict(model, [np.zeros((1, 1))])[0] == 2
    machines[2].b = 0.5  # votes 0, 2, 1: a three-way tie broken by summed margin
    # margins: class 0: 0 - 0.5 = -0.5, class 1: -0 + 0.5 = 0.5, class 2: 0.5 - 0.5 = 0
    assert ovo_predict(model, [np.zeros((1, 1))])[0] == 1


# selection and persistence -------------------------------------------------


def test_select_hyperparameters_returns_grid_point():
    rng = np.random.default_rng(30)
    feats, y = _regression_data(rng, 30)
    C, eps = select_hyperparameters(feats, y, "regression", [LINEAR, LINEAR], [0.1, 1.0], [0.05, 0.2], folds=3)
    assert C in (0.1, 1.0) and eps in (0.05, 0.2)
    x, labels = _three_classes(rng, 8)
    C, eps = select_hyperparameters([x], labels, "ovo", [LINEAR], [0.1, 1.0], [0.05, 0.2], folds=3)
    assert C in (0.1, 1.0) and eps == 0.05


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    feats, y = _regression_data(rng)
    model = fit_rlmkl(feats, y, "regression", [LINEAR, KernelSpec("hi")])
    save_model(tmp_path / "m.npz", model, {"note": 1})
    back, extra = load_model(tmp_path / "m.npz")
    assert extra == {"note": 1}
    test = [rng.normal(size=(4, 5)), rng.normal(size=(4, 3))]
    assert np.array_equal(decision_function(back, test), decision_function(model, test))

    x, labels = _three_classes(rng)
    ovo = ovo_fit([x], labels, [LINEAR])
    save_model(tmp_path / "o.npz", ovo)
    back, _ = load_model(tmp_path / "o.npz")
    assert np.array_equal(ovo_predict(back, [x]), ovo_predict(ovo, [x]))
