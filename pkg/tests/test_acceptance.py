"""
Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(collected in the terminal summary) at the stated tolerance and runtime.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import sys
import time
import warnings

import numpy as np
import pytest

from infkit import experiments as E
from infkit.influence import (HessianOperator, LissaConfig, exact_gif, gram_hvp, lissa_gif, matrix_operator,
                              neumann_series, solve_gif, target_gradient)
from infkit.model import ACTIVATIONS, LOSSES, LabeledSet, ModelSpec, ParamVector, grad, hvp, losses
from infkit.selection import IndexSet, SelectionCriterion, select
from infkit.spectral import lanczos_topk, negative_rate_sweep

from conftest import ACCEPTANCE_LINES, random_problem

# shared protocol of the desk-scale MLP studies: truncated LiSSA on cached
# Hessian columns, unit-gamma normalized steps, stop once self-acc <= 0.4%
MLP_SETTINGS = dict(hessian="plain", solver="lissa-cached", lissa=LissaConfig(max_iters=100, tol=1e-8),
                    require_convergence=False)
MLP_POLICY = E.UpdatePolicy("normalized-iterative", gamma=1.0, stop="self_acc", threshold=0.4, max_steps=100,
                            anchor="stationary")


def report(number: int, ok: bool, detail: str, elapsed: float, budget: float):
    in_time = elapsed < budget
    line = f"{'PASS' if ok and in_time else 'FAIL'} criterion {number}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def test_criterion_01_full_set_reduction():
    start = time.perf_counter()
    worst_exact = worst_lissa = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(5, 99))
        m = 5 * d
        spec = ModelSpec.mlp([d, 1], loss_kind="mse")
        params = spec.init_params(seed)
        w = np.zeros(m, dtype=np.int64)
        w[rng.choice(m, 3, replace=False)] = 1
        data = LabeledSet(rng.standard_normal((m, d)), rng.standard_normal(m), w)
        H = HessianOperator(spec, params, data, w).dense()
        g = target_gradient(spec, params, data, w)
        full = np.arange(spec.param_count)
        newton = -np.linalg.solve(H, g)
        exact = exact_gif(H, g, full)
        res = lissa_gif(spec, params, data, w, full, config=LissaConfig(tol=1e-12, max_iters=100_000, mu=2.0),
                        cached=True)
        assert res.converged
        worst_exact = max(worst_exact, rel(exact, newton))
        worst_lissa = max(worst_lissa, rel(res.influence, exact))
    ok = worst_exact < 1e-10 and worst_lissa < 1e-8
    report(1, ok, f"exact_gif vs -H^-1 g max rel err {worst_exact:.1e} (< 1e-10), "
                  f"lissa_gif {worst_lissa:.1e} (< 1e-8) over 20 PD quadratics",
           time.perf_counter() - start, 10)


def test_criterion_02_pseudoinverse_oracle():
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(20):
        for ratio in (0.05, 0.15, 0.3):
            rng = np.random.default_rng(seed)
            spec = ModelSpec.mlp([4, 6, 3])
            params = spec.init_params(seed)
            params = params.with_values(params.values + 0.3 * rng.standard_normal(params.n))
            w = np.zeros(30, dtype=np.int64)
            w[rng.choice(30, 3, replace=False)] = 1
            data = LabeledSet(rng.standard_normal((30, 4)), rng.integers(0, 3, 30), w)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                J = select(spec, None, SelectionCriterion("random", ratio, seed=seed))
            H = HessianOperator(spec, params, data, w).dense()
            HJ = H[:, J.indices]
            g = target_gradient(spec, params, data, w)
            oracle = np.linalg.solve(HJ.T @ HJ, HJ.T @ g)
            res = lissa_gif(spec, params, data, w, J, config=LissaConfig(tol=1e-10, max_iters=500_000), cached=True)
            worst = max(worst, rel(res.vector, oracle))
            cases += 1
    report(2, worst < 1e-4, f"lissa_gif vs dense (H_J^T H_J)^-1 H_J^T g max rel err {worst:.1e} (< 1e-4), "
                            f"{cases} cases", time.perf_counter() - start, 60)


def test_criterion_03_masked_double_hvp():
    start = time.perf_counter()
    worst = 0.0
    for case in range(50):
        spec, params, data = random_problem(case, sizes=(3, 5, 4), m=15,
                                            activation=ACTIVATIONS[case % len(ACTIVATIONS)])
        rng = np.random.default_rng(1000 + case)
        n = spec.param_count
        J = np.sort(rng.choice(n, size=int(rng.integers(2, n // 2)), replace=False))
        op = HessianOperator(spec, params, data, np.zeros(data.size))
        H = op.dense()
        v = rng.standard_normal(J.size)
        worst = max(worst, rel(gram_hvp(op, J, v, n), H[:, J].T @ H[:, J] @ v))
    report(3, worst < 1e-10, f"two-HVP H_J^T H_J v vs dense max rel err {worst:.1e} (< 1e-10), 50 random J",
           time.perf_counter() - start, 10)


def test_criterion_04_rescaling():
    start = time.perf_counter()
    # (a) scale invariance on a model: loss scaled by c scales H and g alike
    spec, params, data = random_problem(4, sizes=(3, 5, 3), m=20)
    w = np.zeros(data.size, dtype=np.int64)
    w[:4] = 1
    op = HessianOperator(spec, params, data, w)
    g = target_gradient(spec, params, data, w)
    J = np.array([1, 6, 9, 17, 30])
    base = exact_gif(op.dense(), g, J)
    scale_err = max(rel(exact_gif(op.scaled(1.0 / c).dense(), c * g, J), base) for c in (1e-3, 1.0, 1e3))
    # (b) H_J^T H_J with spectral radius rho = 5
    rng = np.random.default_rng(0)
    n, rho = 30, 5.0
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 1.5, n)
    H = (Q * d) @ Q.T
    Jb = np.sort(rng.choice(n, 8, replace=False))
    H *= np.sqrt(rho / np.linalg.eigvalsh(H[:, Jb].T @ H[:, Jb]).max())
    gram = H[:, Jb].T @ H[:, Jb]
    b = H[:, Jb].T @ rng.standard_normal(n)
    raw = neumann_series(matrix_operator(gram), b, LissaConfig(max_iters=100, window=100, growth=1e300))
    growth = max(raw.history) / raw.history[0]
    M = np.sqrt(rho + 1)
    radius = np.abs(np.linalg.eigvalsh(gram / M**2)).max()
    tol = 1e-10
    g_b = rng.standard_normal(n)
    res = solve_gif(matrix_operator(H), g_b, Jb, LissaConfig(scale=M, rescale=False, tol=tol, max_iters=100_000))
    ok = (scale_err < 1e-10 and growth >= 10 and res.converged and res.residual < tol
          and abs(radius - rho / (rho + 1)) < 1e-12 and rel(res.vector, -exact_gif(H, g_b, Jb)) < 1e-6)
    report(4, ok, f"(a) scale-invariance err {scale_err:.1e} (< 1e-10); (b) raw residual grew {growth:.1e}x in 100 "
                  f"iters (>= 10), M=sqrt(6) gives rho(A/M^2)={radius:.4f} = 5/6 and converges "
                  f"(residual {res.residual:.1e} < {tol:g}, {res.iterations} iters)",
           time.perf_counter() - start, 30)


def test_criterion_05_convex_leave_one_out():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m, d = 60, 4
        X = rng.standard_normal((m, d))
        y = X @ rng.standard_normal(d) + 0.5 + 0.2 * rng.standard_normal(m)
        A = np.hstack([X, np.ones((m, 1))])
        spec = ModelSpec.mlp([d, 1], loss_kind="mse")
        params = ParamVector(np.linalg.lstsq(A, y, rcond=None)[0], spec.layer_map())
        for row in rng.choice(m, 4, replace=False):
            w = np.zeros(m, dtype=np.int64)
            w[row] = 1
            refit = np.linalg.lstsq(A[w == 0], y[w == 0], rcond=None)[0]
            for method in ("original", "gif"):
                res = E.remove(spec, params, LabeledSet(X, y), w, E.InfluenceSettings(method, "newton", "dense"),
                               IndexSet.full(spec.param_count), E.UpdatePolicy("theoretical"))
                worst = max(worst, float(np.abs(res.params.values - refit).max()))
    report(5, worst < 1e-6, f"Newton-Hessian removal vs closed-form refit max abs err {worst:.1e} (< 1e-6), "
                            "40 removals", time.perf_counter() - start, 5)


def test_criterion_06_toy_dominance():
    start = time.perf_counter()
    rows = [E.toy_dominance(seed) for seed in range(10)]
    wins = sum(r["gif"] < r["freezing"] and r["gif"] < r["projecting"] for r in rows)
    mean = {k: np.mean([r[k] for r in rows]) for k in ("start", "gif", "freezing", "projecting")}
    report(6, wins >= 9, f"GIF closest to the constrained optimum on {wins}/10 seeds (need >= 9); mean distance "
                         f"start {mean['start']:.3f}, gif {mean['gif']:.3f}, freezing {mean['freezing']:.3f}, "
                         f"projecting {mean['projecting']:.3f}", time.perf_counter() - start, 60)


def test_criterion_07_selection_ordering():
    start = time.perf_counter()
    kinds = ("highest-gradients", "random", "lowest-gradients")
    ratios = (0.05, 0.15, 0.3)
    rows = E.selection_study(kinds, ratios, range(5), E.InfluenceSettings("gif", **MLP_SETTINGS), MLP_POLICY)
    acc = {(k, r): np.mean([x["test_acc"] for x in rows if x["criterion"] == k and x["ratio"] == r])
           for k in kinds for r in ratios}
    ordered = all(acc[(kinds[0], r)] >= acc[(kinds[1], r)] >= acc[(kinds[2], r)] for r in ratios)
    gap = acc[(kinds[0], 0.3)] - acc[(kinds[2], 0.3)]
    table = "; ".join(f"MR {int(r * 100)}%: " + "/".join(f"{acc[(k, r)]:.2f}" for k in kinds) for r in ratios)
    report(7, ordered and gap >= 2.0, f"mean test acc highest/random/lowest {table}; gap at 30% {gap:.2f} (>= 2)",
           time.perf_counter() - start, 600)


def test_criterion_08_backdoor_recovery():
    start = time.perf_counter()
    crit = SelectionCriterion("highest-gradients", 0.05)
    ok, parts = True, []
    for seed in range(3):
        task = E.backdoor_task(seed)
        acc = {}
        for method in ("gif", "freezing", "projecting"):
            _, rep = E.backdoor_recover(task, E.InfluenceSettings(method, **MLP_SETTINGS), crit, MLP_POLICY)
            acc[method] = rep.accuracies()
        beats = acc["gif"]["bd_true_acc"] > max(acc["freezing"]["bd_true_acc"], acc["projecting"]["bd_true_acc"])
        chance = abs(acc["gif"]["bd_label_acc"] - 10.0) <= 10.0
        ok = ok and beats and chance
        parts.append(f"seed {seed} BD-true gif/freez/proj " +
                     "/".join(f"{acc[k]['bd_true_acc']:.1f}" for k in ("gif", "freezing", "projecting")) +
                     f", gif BD-label {acc['gif']['bd_label_acc']:.1f}")
    report(8, ok, "; ".join(parts) + " (need GIF strictly best and BD-label within 10 of chance on every seed)",
           time.perf_counter() - start, 600)


def test_criterion_09_spectral():
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    A = rng.standard_normal((100, 100))
    A = (A + A.T) / 2
    dense = np.linalg.eigvalsh(A)
    top = dense[np.argsort(-np.abs(dense))][:5]
    lz = lanczos_topk(matrix_operator(A), 100, 5, iters=80)
    top_err = float(np.max(np.abs(lz.eigenvalues - top) / np.abs(top)))
    base = lanczos_topk(matrix_operator(A), 100, 100, iters=100, seed=1)
    shift_err = 0.0
    for lam in (0.1, 1.0, 10.0):
        shifted = lanczos_topk(lambda v, lam=lam: A @ v + lam * v, 100, 100, iters=100, seed=1)
        shift_err = max(shift_err, float(np.abs(np.sort(shifted.eigenvalues) - np.sort(base.eigenvalues + lam)).max()))
    spec, params, data = random_problem(9, sizes=(4, 8, 3), m=40)
    lambdas = [0.0, 1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0]
    fracs = [r.negative_fraction for r in negative_rate_sweep(spec, params, data, lambdas, k=20,
                                                              iters=spec.param_count)]
    monotone = all(b <= a for a, b in zip(fracs, fracs[1:]))
    ok = top_err < 1e-6 and shift_err < 1e-9 and monotone
    report(9, ok, f"Lanczos top-5 rel err {top_err:.1e} (< 1e-6); shift identity err {shift_err:.1e} (< 1e-9); "
                  f"negative fraction over lambda {[round(f, 2) for f in fracs]} non-increasing: {monotone}",
           time.perf_counter() - start, 30)


def fd_hessian(spec, theta, data, h):
    """Five-point central differences of the analytic gradient."""
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        g = [grad(spec, theta + s * e, data) for s in (2, 1, -1, -2)]
        H[:, j] = (-g[0] + 8 * g[1] - 8 * g[2] + g[3]) / (12 * h)
    return 0.5 * (H + H.T)


def test_criterion_10_gradient_and_hvp():
    start = time.perf_counter()
    worst_g = worst_h = 0.0
    for seed in range(20):
        for activation in ACTIVATIONS:
            for loss_kind in LOSSES:
                out_act = activation if loss_kind == "mse" else "identity"
                spec, params, data = random_problem(seed, activation=activation, loss_kind=loss_kind,
                                                    output_activation=out_act)
                theta = params.values
                n = theta.size
                fd = np.empty(n)
                for j in range(n):
                    e = np.zeros(n)
                    e[j] = 1e-6
                    fd[j] = (losses(spec, theta + e, data.inputs, data.labels).sum()
                             - losses(spec, theta - e, data.inputs, data.labels).sum()) / 2e-6
                worst_g = max(worst_g, rel(grad(spec, theta, data), fd))
                H = fd_hessian(spec, theta, data, 1e-6 if activation == "relu" else 1e-3)
                v = np.random.default_rng(seed).standard_normal(n)
                worst_h = max(worst_h, rel(hvp(spec, params, data, np.ones(data.size), v), H @ v))
    ok = worst_g < 1e-5 and worst_h < 1e-8
    report(10, ok, f"grad vs finite differences max rel err {worst_g:.1e} (< 1e-5); hvp vs dense Hessian "
                   f"max rel err {worst_h:.1e} (< 1e-8); 4 activations x 2 losses x 20 seeds",
           time.perf_counter() - start, 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
