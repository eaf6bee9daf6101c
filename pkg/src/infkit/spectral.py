"""
Hessian spectrum diagnostics: Lanczos with full reorthogonalization and the
negative-eigenvalue rate of the L2-regularized Hessian.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import DomainError
from .influence import HessianOperator
from .model import LabeledSet, ModelSpec, ParamVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    negative_fraction: float
    lam: float = 0.0
    operator: str = "H"
    iterations: int = 0
    breakdown: bool = False

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(self.eigenvalues).max())


def lanczos_topk(operator: Callable[[np.ndarray], np.ndarray], n: int, k: int, iters: int | None = None,
                 seed: int = 0, tag: str = "H", lam: float = 0.0) -> SpectrumReport:
    """Approximate the ``k`` eigenvalues of largest magnitude of a symmetric operator.

    Runs ``iters`` Lanczos steps (default ``min(n, max(2k, 20))``) from a
    seeded random start and reorthogonalizes against every previous vector.
    An invariant subspace (zero ``beta``) stops the recursion early; its
    Ritz values are then exact and ``breakdown`` is set.
    """
    if iters is None:
        iters = min(n, max(2 * k, 20))
    if not 1 <= k <= iters <= n:
        raise DomainError(f"need 1 <= k <= iters <= n, got k={k}, iters={iters}, n={n}")
    rng = np.random.default_rng(seed)
    Q = np.zeros((iters, n))
    alpha = np.zeros(iters)
    beta = np.zeros(iters)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    steps = iters
    breakdown = False
    for j in range(iters):
        Q[j] = q
        r = operator(q)
        alpha[j] = q @ r
        r = r - alpha[j] * q - (beta[j - 1] * Q[j - 1] if j > 0 else 0.0)
        # two passes of classical Gram-Schmidt against all Lanczos vectors
        for _ in range(2):
            r -= Q[:j + 1].T @ (Q[:j + 1] @ r)
        beta[j] = np.linalg.norm(r)
        if j + 1 == iters:
            break
        if beta[j] <= 1e-12 * max(1.0, abs(alpha[j])):
            steps = j + 1
            breakdown = True
            break
        q = r / beta[j]
    ritz = eigh_tridiagonal(alpha[:steps], beta[:steps - 1], eigvals_only=True)
    order = np.argsort(-np.abs(ritz), kind="stable")
    top = ritz[order[:min(k, steps)]]
    frac = float(np.mean(top < 0)) if top.size else 0.0
    return SpectrumReport(top, frac, lam, tag, steps, breakdown)


def spectral_radius(operator: Callable[[np.ndarray], np.ndarray], n: int, iters: int | None = None,
                    seed: int = 0) -> float:
    return lanczos_topk(operator, n, 1, iters, seed).spectral_radius


def negative_rate_sweep(spec: ModelSpec, params: ParamVector, data: LabeledSet, lambdas: Sequence[float],
                        k: int, iters: int | None = None, seed: int = 0) -> list[SpectrumReport]:
    """Fraction of negative eigenvalues among the top-``k`` (by magnitude) of ``H + lam I``.

    ``H`` is the mean-loss Hessian over all rows; one Lanczos run per ``lam``
    from the same start vector.
    """
    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise DomainError("lambda grid is empty")
    if any(b < a for a, b in zip(lambdas, lambdas[1:])):
        raise DomainError("lambda grid must be ascending")
    base = HessianOperator(spec, params, data, np.zeros(data.size), "plain")
    n = spec.param_count
    reports = []
    for lam in lambdas:
        rep = lanczos_topk(lambda v, lam=lam: base(v) + lam * v, n, k, iters, seed, tag="H+lam*I", lam=lam)
        logger.info("lambda=%g negative fraction %.3f", lam, rep.negative_fraction)
        reports.append(rep)
    return reports


def sweep_csv(reports: Sequence[SpectrumReport]) -> str:
    """``lambda,neg_fraction,eig_0,...`` with one row per grid point."""
    width = max(len(r.eigenvalues) for r in reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lambda", "neg_fraction"] + [f"eig_{i}" for i in range(width)])
    for r in reports:
        writer.writerow([repr(r.lam), repr(r.negative_fraction)] + [repr(float(e)) for e in r.eigenvalues])
    return buf.getvalue()
