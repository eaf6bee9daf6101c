"""
Influence computations.

Conventions
-----------
The risk whose curvature enters every influence is the mean loss
``(1/m) sum_i l(z_i)`` (optionally with the L2 term). The target gradient is
the plain sum ``g = sum_i w_i grad l(z_i)`` over upweighted examples. With
this pairing the parameter change caused by removing the upweighted group is
``eps * influence`` with ``eps = -1/m``.

Iterative solvers return the *solve* in ``InfluenceResult.vector``
(``H^-1 g`` for the original influence, ``(H_J^T H_J)^-1 H_J^T g`` for the
generalized one). The influence itself carries a minus sign and is exposed
as ``InfluenceResult.influence``; that property is the only place the sign
is applied. The dense oracles ``exact_influence`` and ``exact_gif`` return
the signed influence directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, DomainError, RefusedError, ShapeError, SingularError
from .model import DENSE_HESSIAN_CAP, BatchSample, LabeledSet, ModelSpec, ParamVector, grad, hvp, hvp_batch
from .selection import IndexSet

logger = logging.getLogger(__name__)

METHODS = ("gif", "freezing", "projecting", "original")
HESSIAN_MODES = ("plain", "newton")


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LissaConfig:
    """Settings of the Neumann-series solvers.

    ``window`` and ``growth`` define divergence: the step norm
    ``||I_k - I_{k-1}||`` rose for ``window`` consecutive iterations, or it
    exceeds ``growth`` times its minimum so far. On divergence the loss is
    divided by a further factor ``mu`` and the series restarts from scratch.
    ``samples`` switches the Hessian to a fixed uniformly drawn subset of
    ``samples`` rows.
    """

    max_iters: int = 10_000
    tol: float = 1e-10
    mu: float = 10.0
    scale: float = 1.0
    samples: int | None = None
    window: int = 5
    growth: float = 10.0
    max_restarts: int = 20
    rescale: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if not self.mu > 1:
            raise DomainError("mu must be greater than 1")
        if not self.scale >= 1:
            raise DomainError("initial scale M must be >= 1")
        if self.max_iters < 1 or self.window < 1 or self.max_restarts < 0:
            raise DomainError("max_iters and window must be positive, max_restarts non-negative")


@dataclass(frozen=True)
class InfluenceResult:
    vector: np.ndarray
    method: str
    iterations: int = 0
    scale: float = 1.0
    converged: bool = True
    residual: float = 0.0
    restarts: int = 0
    indices: IndexSet | None = None
    history: tuple[float, ...] = ()
    diverged: bool = False

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(v)) and not self.diverged:
            raise ShapeError("influence vector has non-finite entries")
        object.__setattr__(self, "vector", v)

    @property
    def influence(self) -> np.ndarray:
        """Signed influence ``d theta_J / d eps``."""
        return -self.vector

    def diagnostics(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "scale": self.scale,
            "restarts": self.restarts,
            "converged": self.converged,
            "residual": self.residual,
        }


# --------------------------------------------------------------------------
# Hessian operator
# --------------------------------------------------------------------------


class HessianOperator:
    """``v -> H v`` for the (optionally scaled) mean-loss Hessian.

    ``mode="plain"`` averages the curvature of all rows; ``mode="newton"``
    drops the upweighted rows, i.e. ``(1/m) sum_i (1 - w_i) Hess l(z_i)``.
    ``scale`` divides the loss (and so the Hessian) by ``M``.
    """

    def __init__(self, spec: ModelSpec, params: ParamVector, data: LabeledSet, w=None, mode: str = "plain",
                 regularized: bool = False, scale: float = 1.0, sample: BatchSample | None = None):
        if mode not in HESSIAN_MODES:
            raise DomainError(f"unknown Hessian mode {mode!r}")
        self.spec, self.params, self.data = spec, params, data
        self.w = np.asarray(data.mask if w is None else w, dtype=np.float64)
        if self.w.shape != (data.size,):
            raise ShapeError("upweight mask length differs from the data size")
        self.mode, self.regularized, self.scale = mode, regularized, float(scale)
        m = data.size
        keep = 1.0 - self.w if mode == "newton" else np.ones(m)
        if sample is None:
            weights = keep / m
        else:
            weights = sample.weights(m) * keep / len(sample.indices)
        self.row_weights = weights
        self.calls = 0

    @property
    def n(self) -> int:
        return self.spec.param_count

    def scaled(self, scale: float) -> "HessianOperator":
        op = object.__new__(HessianOperator)
        op.__dict__.update(self.__dict__)
        op.scale = float(scale)
        op.calls = 0
        return op

    def __call__(self, v: np.ndarray) -> np.ndarray:
        self.calls += 1
        out = hvp(self.spec, self.params, self.data, self.row_weights, v, regularized=self.regularized)
        return out / self.scale if self.scale != 1.0 else out

    def columns(self, idx, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
        """The column block ``H[:, idx]``, one HVP per column."""
        idx = np.asarray(idx)
        if len(idx) > cap:
            raise RefusedError(f"{len(idx)} dense Hessian columns exceed the cap of {cap}")
        cols = np.empty((self.n, len(idx)))
        # chunk the directions so the batched R-operator stays within ~64 MB
        width = max(self.data.size * max(layer.out_dim for layer in self.spec.layers), 1)
        chunk = int(np.clip(8_000_000 // width, 1, 256))
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            E = np.zeros((self.n, len(part)))
            E[part, np.arange(len(part))] = 1.0
            cols[:, start:start + len(part)] = hvp_batch(self.spec, self.params, self.data, self.row_weights, E,
                                                         regularized=self.regularized)
            self.calls += len(part)
        return cols / self.scale if self.scale != 1.0 else cols

    def dense(self, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
        H = self.columns(np.arange(self.n), cap)
        return 0.5 * (H + H.T)


def matrix_operator(H: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap an explicit symmetric matrix as an operator (for tests and toy problems)."""
    H = np.asarray(H, dtype=np.float64)
    return lambda v: H @ v


def target_gradient(spec: ModelSpec, params: ParamVector, data: LabeledSet, w=None) -> np.ndarray:
    """``sum_i w_i grad l(z_i)``."""
    w = data.mask if w is None else w
    return grad(spec, params, data, np.asarray(w, dtype=np.float64))


def _as_indices(J, n: int) -> np.ndarray:
    if J is None:
        return np.arange(n)
    idx = J.indices if isinstance(J, IndexSet) else np.asarray(J, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"index set out of range for {n} parameters")
    return idx


# --------------------------------------------------------------------------
# dense oracles
# --------------------------------------------------------------------------


def _condition(M: np.ndarray) -> float:
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def exact_influence(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``-H^-1 g`` by a dense solve."""
    H = np.asarray(H, dtype=np.float64)
    cond = _condition(H)
    if not cond < 1e14:
        raise SingularError("Hessian is singular", cond)
    return -np.linalg.solve(H, g)


def exact_gif(H: np.ndarray, g: np.ndarray, J) -> np.ndarray:
    """``-(H_J^T H_J)^-1 H_J^T g``: the least-squares minimizer of ``||g + H_J d||``.

    ``H_J`` is the column block of ``H`` indexed by ``J``. Solved with a QR
    factorization of ``H_J`` rather than through the normal equations.
    """
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n = H.shape[0]
    if H.shape != (n, n) or g.shape != (n,):
        raise ShapeError("H must be n x n and g of length n")
    idx = _as_indices(J, n)
    return _column_lstsq(H[:, idx], g)


def _column_lstsq(HJ: np.ndarray, g: np.ndarray) -> np.ndarray:
    cond = _condition(HJ)
    if not cond < 1e12:
        raise SingularError("H_J is rank deficient", cond)
    Q, R = np.linalg.qr(HJ)
    return -np.linalg.solve(R, Q.T @ g)


def exact_freezing(H: np.ndarray, g: np.ndarray, J) -> np.ndarray:
    """``-H_{JxJ}^-1 g_J``: influence when the other parameters are frozen."""
    H = np.asarray(H, dtype=np.float64)
    idx = _as_indices(J, H.shape[0])
    block = H[np.ix_(idx, idx)]
    cond = _condition(block)
    if not cond < 1e14:
        raise SingularError("principal block H_JxJ is singular", cond)
    return -np.linalg.solve(block, np.asarray(g)[idx])


def exact_projecting(H: np.ndarray, g: np.ndarray, J) -> np.ndarray:
    """The full influence ``-H^-1 g`` restricted to ``J``."""
    idx = _as_indices(J, np.asarray(H).shape[0])
    return exact_influence(H, g)[idx]


# --------------------------------------------------------------------------
# Neumann series
# --------------------------------------------------------------------------


@dataclass
class _Attempt:
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool
    diverged: bool
    history: list[float] = field(default_factory=list)


def neumann_series(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, config: LissaConfig,
                   on_step: Callable[[int, float], None] | None = None) -> _Attempt:
    """Iterate ``I_k = b + I_{k-1} - A I_{k-1}`` from ``I_0 = b``.

    Stops when the step norm falls below ``config.tol`` (converged), when it
    shows divergence, or after ``config.max_iters`` iterations.
    """
    current = np.array(b, dtype=np.float64)
    history: list[float] = []
    best = np.inf
    rising = 0
    for k in range(1, config.max_iters + 1):
        nxt = b + current - apply_A(current)
        residual = float(np.linalg.norm(nxt - current))
        history.append(residual)
        if on_step is not None:
            on_step(k, residual)
        if not np.isfinite(residual):
            return _Attempt(current, k, residual, False, True, history)
        rising = rising + 1 if len(history) > 1 and residual > history[-2] else 0
        best = min(best, residual)
        current = nxt
        if residual < config.tol:
            return _Attempt(current, k, residual, True, False, history)
        if rising >= config.window or residual > config.growth * best:
            return _Attempt(current, k, residual, False, True, history)
    return _Attempt(current, config.max_iters, history[-1] if history else 0.0, False, False, history)


def rescale_until_convergent(inner: Callable[[float], _Attempt], config: LissaConfig, method: str,
                             indices: IndexSet | None = None) -> InfluenceResult:
    """Run ``inner(scale)``; on divergence multiply ``scale`` by ``mu`` and restart.

    ``inner`` solves the problem for the loss divided by ``scale``. Both
    influence solves are invariant to that scaling, so the answer does not
    depend on how many restarts were needed. With ``config.rescale`` off a
    divergent attempt is returned flagged instead of restarted.
    """
    scale = config.scale
    histories: list[list[float]] = []
    restarts = config.max_restarts if config.rescale else 0
    for attempt in range(restarts + 1):
        res = inner(scale)
        histories.append(res.history)
        if not res.diverged:
            logger.debug("%s: %d iterations at scale %.3g, residual %.3e", method, res.iterations, scale, res.residual)
            return InfluenceResult(res.vector, method, res.iterations, scale, res.converged, res.residual,
                                   attempt, indices, tuple(res.history))
        if not config.rescale:
            return InfluenceResult(res.vector, method, res.iterations, scale, False, res.residual,
                                   0, indices, tuple(res.history), diverged=True)
        logger.info("%s diverged at scale %.3g after %d iterations; rescaling by %g",
                    method, scale, res.iterations, config.mu)
        scale *= config.mu
    raise ConvergenceError(f"{method}: series still diverging after {restarts} restarts", histories)


def gram_hvp(apply_H: Callable[[np.ndarray], np.ndarray], idx: np.ndarray, v: np.ndarray, n: int) -> np.ndarray:
    """``H_J^T H_J v`` with two HVPs: scatter ``v`` into zeros, apply ``H`` twice, gather ``J``."""
    padded = np.zeros(n)
    padded[idx] = v
    return apply_H(apply_H(padded))[idx]


def _sample_for(config: LissaConfig, m: int) -> BatchSample | None:
    if config.samples is None:
        return None
    return BatchSample.draw(m, config.samples, config.seed)


def _index_set(J, idx: np.ndarray, n: int) -> IndexSet:
    return J if isinstance(J, IndexSet) else IndexSet(np.sort(idx), len(idx) / n, "custom")


def solve_original(apply_H: Callable[[np.ndarray], np.ndarray], g: np.ndarray,
                   config: LissaConfig = LissaConfig(), on_step=None) -> InfluenceResult:
    """``H^-1 g`` by ``I_k = g + (I - H) I_{k-1}`` for a symmetric operator ``apply_H``.

    Converges only when ``rho(I - H) < 1``. Rescaling divides ``H`` and
    ``g`` by ``M`` alike, which shrinks positive eigenvalues into range but
    cannot cure negative curvature.
    """
    g = np.asarray(g, dtype=np.float64)

    def inner(scale):
        return neumann_series(lambda v: apply_H(v) / scale, g / scale, config, on_step)

    return rescale_until_convergent(inner, config, "original", IndexSet.full(g.size))


def solve_gif(apply_H: Callable[[np.ndarray], np.ndarray] | None, g: np.ndarray, J,
              config: LissaConfig = LissaConfig(), on_step=None, columns: np.ndarray | None = None) -> InfluenceResult:
    """Generalized influence solve ``(H_J^T H_J)^-1 H_J^T g`` without forming ``H``.

    ``I_0 = H_J^T g`` and every iteration applies ``H_J^T H_J`` through
    :func:`gram_hvp` (two HVPs). For the loss divided by ``M`` the operator
    becomes ``H_J^T H_J / M**2`` and ``I_0`` picks up the same factor, which
    leaves the limit unchanged.

    ``columns`` (the precomputed block ``H[:, J]``) replaces the HVPs by
    matrix products; the iterates are the same.
    """
    g = np.asarray(g, dtype=np.float64)
    n = g.size
    idx = _as_indices(J, n)
    if columns is None:
        Hg = apply_H(g)[idx]
        gram = lambda v: gram_hvp(apply_H, idx, v, n)
    else:
        Hg = columns.T @ g
        gram = lambda v: columns.T @ (columns @ v)

    def inner(scale):
        return neumann_series(lambda v: gram(v) / scale**2, Hg / scale**2, config, on_step)

    return rescale_until_convergent(inner, config, "gif", _index_set(J, idx, n))


def solve_freezing(apply_H: Callable[[np.ndarray], np.ndarray] | None, g: np.ndarray, J,
                   config: LissaConfig = LissaConfig(), on_step=None, columns: np.ndarray | None = None) -> InfluenceResult:
    """``H_{JxJ}^-1 g_J`` by a Neumann series on the principal block (one HVP per iteration)."""
    g = np.asarray(g, dtype=np.float64)
    n = g.size
    idx = _as_indices(J, n)

    def block(v):
        if columns is not None:
            return columns[idx] @ v
        padded = np.zeros(n)
        padded[idx] = v
        return apply_H(padded)[idx]

    def inner(scale):
        return neumann_series(lambda v: block(v) / scale, g[idx] / scale, config, on_step)

    return rescale_until_convergent(inner, config, "freezing", _index_set(J, idx, n))


def _operator(spec, params, data, w, mode, regularized, config):
    return HessianOperator(spec, params, data, w, mode, regularized, sample=_sample_for(config, data.size))


def lissa_original(spec: ModelSpec, params: ParamVector, data: LabeledSet, target_grad: np.ndarray,
                   config: LissaConfig = LissaConfig(), mode: str = "plain", w=None,
                   regularized: bool = False, on_step=None, cached: bool = False,
                   cap: int = DENSE_HESSIAN_CAP) -> InfluenceResult:
    """Original influence solve ``H^-1 g`` on a model, see :func:`solve_original`.

    ``cached=True`` forms the Hessian once (``n`` HVPs) and iterates with
    matrix products.
    """
    g = np.asarray(target_grad, dtype=np.float64)
    if g.shape != (spec.param_count,):
        raise ShapeError(f"target gradient must have length {spec.param_count}")
    op = _operator(spec, params, data, w, mode, regularized, config)
    if cached:
        op = matrix_operator(op.dense(cap))
    return solve_original(op, g, config, on_step)


def _cached_columns(op, J, cached, cap):
    if not cached:
        return None
    return op.columns(_as_indices(J, op.n), cap)


def lissa_gif(spec: ModelSpec, params: ParamVector, data: LabeledSet, w, J, mode: str = "plain",
              config: LissaConfig = LissaConfig(), regularized: bool = False, target_grad=None,
              on_step=None, cached: bool = False, cap: int = DENSE_HESSIAN_CAP) -> InfluenceResult:
    """Generalized influence solve on a model, see :func:`solve_gif`.

    ``cached=True`` forms the ``|J|`` columns ``H[:, J]`` once and iterates
    with matrix products.
    """
    w = data.mask if w is None else np.asarray(w)
    g = target_gradient(spec, params, data, w) if target_grad is None else np.asarray(target_grad, dtype=np.float64)
    op = _operator(spec, params, data, w, mode, regularized, config)
    return solve_gif(op, g, J, config, on_step, _cached_columns(op, J, cached, cap))


def lissa_freezing(spec, params, data, w, J, mode="plain", config: LissaConfig = LissaConfig(),
                   regularized=False, target_grad=None, on_step=None, cached: bool = False,
                   cap: int = DENSE_HESSIAN_CAP) -> InfluenceResult:
    w = data.mask if w is None else np.asarray(w)
    g = target_gradient(spec, params, data, w) if target_grad is None else np.asarray(target_grad, dtype=np.float64)
    op = _operator(spec, params, data, w, mode, regularized, config)
    return solve_freezing(op, g, J, config, on_step, _cached_columns(op, J, cached, cap))


# --------------------------------------------------------------------------
# method front-ends
# --------------------------------------------------------------------------


def _dense_hessian(spec, params, data, w, mode, regularized, cap):
    return HessianOperator(spec, params, data, w, mode, regularized).dense(cap)


def freezing_influence(spec: ModelSpec, params: ParamVector, data: LabeledSet, w, J, config: LissaConfig = LissaConfig(),
                       mode: str = "plain", solver: str = "dense", regularized: bool = False,
                       cap: int = DENSE_HESSIAN_CAP, target_grad=None) -> InfluenceResult:
    """Influence on ``theta_J`` with every other parameter frozen.

    Solves ``H_{JxJ} d = g_J`` on the principal block; ``solver="dense"``
    builds the block from ``|J|`` HVP columns.
    """
    n = spec.param_count
    idx = _as_indices(J, n)
    w = data.mask if w is None else np.asarray(w)
    if solver in ("lissa", "lissa-cached"):
        return lissa_freezing(spec, params, data, w, J, mode, config, regularized, target_grad,
                              cached=solver == "lissa-cached", cap=cap)
    g = target_gradient(spec, params, data, w) if target_grad is None else np.asarray(target_grad, dtype=np.float64)
    cols = HessianOperator(spec, params, data, w, mode, regularized).columns(idx, cap)
    block = cols[idx]
    vec = -exact_freezing(0.5 * (block + block.T), g[idx], np.arange(len(idx)))
    return InfluenceResult(vec, "freezing", 0, 1.0, True, 0.0, 0, _index_set(J, idx, n))


def original_influence(spec, params, data, w=None, config: LissaConfig = LissaConfig(), mode: str = "plain",
                       solver: str = "dense", regularized: bool = False, cap: int = DENSE_HESSIAN_CAP,
                       target_grad=None) -> InfluenceResult:
    """Full-parameter influence solve ``H^-1 g``."""
    w = data.mask if w is None else np.asarray(w)
    g = target_gradient(spec, params, data, w) if target_grad is None else np.asarray(target_grad, dtype=np.float64)
    if solver in ("lissa", "lissa-cached"):
        return lissa_original(spec, params, data, g, config, mode, w, regularized, cached=solver == "lissa-cached",
                              cap=cap)
    H = _dense_hessian(spec, params, data, w, mode, regularized, cap)
    return InfluenceResult(-exact_influence(H, g), "original", 0, 1.0, True, 0.0, 0, IndexSet.full(spec.param_count))


def projecting_influence(spec, params, data, w, J, config: LissaConfig = LissaConfig(), mode: str = "plain",
                         solver: str = "dense", regularized: bool = False, cap: int = DENSE_HESSIAN_CAP,
                         target_grad=None) -> InfluenceResult:
    """The full influence solve restricted to the indices in ``J``."""
    n = spec.param_count
    idx = _as_indices(J, n)
    full = original_influence(spec, params, data, w, config, mode, solver, regularized, cap, target_grad)
    indices = _index_set(J, idx, n)
    return InfluenceResult(full.vector[idx], "projecting", full.iterations, full.scale, full.converged,
                           full.residual, full.restarts, indices, full.history, full.diverged)


def gif_influence(spec, params, data, w, J, config: LissaConfig = LissaConfig(), mode: str = "plain",
                  solver: str = "lissa", regularized: bool = False, cap: int = DENSE_HESSIAN_CAP,
                  target_grad=None) -> InfluenceResult:
    """Generalized influence solve, iteratively (default) or against the dense oracle."""
    if solver in ("lissa", "lissa-cached"):
        return lissa_gif(spec, params, data, w, J, mode, config, regularized, target_grad,
                         cached=solver == "lissa-cached", cap=cap)
    n = spec.param_count
    idx = _as_indices(J, n)
    w = data.mask if w is None else np.asarray(w)
    g = target_gradient(spec, params, data, w) if target_grad is None else np.asarray(target_grad, dtype=np.float64)
    # only the |J| columns H_J are needed
    HJ = HessianOperator(spec, params, data, w, mode, regularized).columns(idx, cap)
    return InfluenceResult(-_column_lstsq(HJ, g), "gif", 0, 1.0, True, 0.0, 0, _index_set(J, idx, n))


def compute_influence(method: str, spec: ModelSpec, params: ParamVector, data: LabeledSet, w, J,
                      config: LissaConfig = LissaConfig(), mode: str = "plain", solver: str = "lissa",
                      regularized: bool = False, cap: int = DENSE_HESSIAN_CAP, target_grad=None) -> InfluenceResult:
    """Dispatch on ``method`` in ``gif``, ``freezing``, ``projecting``, ``original``."""
    if method == "gif":
        return gif_influence(spec, params, data, w, J, config, mode, solver, regularized, cap, target_grad)
    if method == "freezing":
        return freezing_influence(spec, params, data, w, J, config, mode, solver, regularized, cap, target_grad)
    if method == "projecting":
        return projecting_influence(spec, params, data, w, J, config, mode, solver, regularized, cap, target_grad)
    if method == "original":
        return original_influence(spec, params, data, w, config, mode, solver, regularized, cap, target_grad)
    raise DomainError(f"unknown influence method {method!r}; expected one of {METHODS}")


def influence_score(spec: ModelSpec, params: ParamVector, test_example: tuple, influence, J=None) -> float:
    """``<grad l(z_test), I>`` with the test gradient restricted to ``J``.

    ``influence`` is an :class:`InfluenceResult` (its signed influence is
    used) or an already signed vector.
    """
    x, y = test_example
    if isinstance(influence, InfluenceResult):
        vec = influence.influence
        if J is None:
            J = influence.indices
    else:
        vec = np.asarray(influence, dtype=np.float64)
    n = spec.param_count
    idx = _as_indices(J, n)
    if vec.shape != (len(idx),):
        raise ShapeError(f"influence has length {vec.shape}, index set has {len(idx)} entries")
    labels = np.atleast_1d(y) if spec.loss_kind == "cross-entropy" else np.reshape(y, (1, -1))
    g_test = grad(spec, params, LabeledSet(np.atleast_2d(x), labels), np.ones(1))
    return float(g_test[idx] @ vec)
