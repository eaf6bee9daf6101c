"""
Removal, relabeling and backdoor-recovery protocols.

Updates follow one of two policies:

``theoretical``
    one step ``theta_J += eps * I`` with ``eps = -1/m``.
``normalized-iterative``
    repeated unit-norm steps ``theta_J += gamma * sign(eps) * I / ||I||``,
    recomputing the influence at the current parameters before every step.

By default (``anchor="stationary"``) the target gradient handed to the
solvers is ``sum_i w_i grad l(z_i) - sum_i w_i grad l(z'_i)`` evaluated at
the current parameters, the plain influence target. ``anchor="current"``
uses ``-m * grad F(theta_t)`` instead, where ``F`` is the mean risk of the
*changed* dataset (removed rows weighted 0, relabeled rows swapped in). The
two agree at a stationary point of the original risk; the second keeps the
series pointed at the new optimum, so iterating it has that optimum as a
fixed point. ``cap_step`` limits each normalized step to the length of the
one-shot step, which lets the iteration settle there instead of orbiting at
distance ``gamma``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data as datasets
from .errors import ConvergenceError, DomainError, InfkitError
from .influence import METHODS, InfluenceResult, LissaConfig, compute_influence
from .metrics import MetricsReport, evaluate
from .model import LabeledSet, ModelSpec, ParamVector, TrainConfig, grad, train
from .rng import seed_for
from .selection import IndexSet, SelectionCriterion, select_parameters

logger = logging.getLogger(__name__)

UPDATE_MODES = ("theoretical", "normalized-iterative")
STOP_RULES = ("self_acc", "best_f1", "max_steps")
SOLVERS = ("lissa", "lissa-cached", "dense")


class UpdateAborted(InfkitError, RuntimeError):
    """An influence solve did not converge; ``trace`` holds the metrics so far."""

    def __init__(self, message: str, trace: list[MetricsReport], diagnostics: list[dict]):
        super().__init__(message)
        self.trace = trace
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class UpdatePolicy:
    mode: str = "normalized-iterative"
    gamma: float = 0.03
    stop: str = "max_steps"
    threshold: float = 0.4
    max_steps: int = 50
    anchor: str = "stationary"
    cap_step: bool = False

    def __post_init__(self):
        if self.mode not in UPDATE_MODES:
            raise DomainError(f"unknown update mode {self.mode!r}")
        if self.stop not in STOP_RULES:
            raise DomainError(f"unknown stop rule {self.stop!r}")
        if self.gamma < 0:
            raise DomainError("gamma must be non-negative")
        if self.max_steps < 0:
            raise DomainError("max_steps must be non-negative")
        if self.anchor not in ("current", "stationary"):
            raise DomainError(f"unknown anchor {self.anchor!r}")


@dataclass(frozen=True)
class InfluenceSettings:
    method: str = "gif"
    hessian: str = "plain"
    solver: str = "lissa"
    lissa: LissaConfig = LissaConfig()
    regularized: bool = False
    cap: int = 2000
    require_convergence: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}")
        if self.solver not in SOLVERS:
            raise DomainError(f"unknown solver {self.solver!r}")


@dataclass
class UpdateResult:
    params: ParamVector
    trace: list[MetricsReport]
    indices: IndexSet
    diagnostics: list[dict] = field(default_factory=list)

    def __iter__(self):
        yield self.params
        yield self.trace


def _merge(data: LabeledSet, w: np.ndarray, replacement: LabeledSet | None) -> LabeledSet:
    """The changed dataset: rows with ``w = 1`` replaced by ``replacement`` rows."""
    if replacement is None:
        return data
    inputs = np.where(w[:, None] == 1, replacement.inputs, data.inputs)
    labels = np.where(w.reshape((-1,) + (1,) * (data.labels.ndim - 1)) == 1, replacement.labels, data.labels)
    return LabeledSet(inputs, labels)


def update_target(spec: ModelSpec, theta: ParamVector, data: LabeledSet, w: np.ndarray,
                  replacement: LabeledSet | None, anchor: str, regularized: bool) -> np.ndarray:
    """Gradient handed to the solvers (see module docstring)."""
    m = data.size
    if anchor == "stationary":
        g = grad(spec, theta, data, w)
        if replacement is not None:
            g = g - grad(spec, theta, replacement, w)
        return g
    keep = 1.0 - w
    g_new = grad(spec, theta, data, keep)
    if replacement is not None:
        g_new = g_new + grad(spec, theta, replacement, w)
    if regularized and spec.l2_weight > 0:
        g_new = g_new + m * spec.l2_weight * theta.values
    return -g_new


def _hessian_inputs(data, w, replacement, hessian):
    """Dataset and mask defining the curvature for the chosen Hessian mode."""
    if hessian == "plain":
        return data, w, "plain"
    if replacement is None:
        return data, w, "newton"
    return _merge(data, w, replacement), np.zeros_like(w), "plain"


def apply_update(spec: ModelSpec, params: ParamVector, data: LabeledSet, w, J: IndexSet,
                 settings: InfluenceSettings, policy: UpdatePolicy, replacement: LabeledSet | None = None,
                 evaluator: Callable[[ParamVector, int], MetricsReport] | None = None) -> UpdateResult:
    """Move ``theta_J`` to undo (or swap) the rows marked by ``w``.

    ``evaluator(params, step)`` produces the metrics recorded after every
    step, starting with step 0 before any update.
    """
    w = np.asarray(w, dtype=np.float64)
    m = data.size
    idx = J.indices
    theta = params.copy()
    evaluator = evaluator or (lambda p, s: MetricsReport(step=s))
    trace = [evaluator(theta, 0)]
    diagnostics: list[dict] = []
    steps = 1 if policy.mode == "theoretical" else policy.max_steps
    if policy.gamma == 0 or steps == 0 or not np.any(w):
        return UpdateResult(theta, trace, J, diagnostics)
    h_data, h_mask, h_mode = _hessian_inputs(data, w, replacement, settings.hessian)
    best = (trace[0].f1 if trace[0].f1 is not None else -np.inf, theta)
    for step in range(1, steps + 1):
        target = update_target(spec, theta, data, w, replacement, policy.anchor, settings.regularized)
        try:
            result = compute_influence(settings.method, spec, theta, h_data, h_mask, J, settings.lissa, h_mode,
                                       settings.solver, settings.regularized, settings.cap, target_grad=target)
        except ConvergenceError as exc:
            raise UpdateAborted(f"{settings.method} influence diverged at step {step}: {exc}", trace,
                                diagnostics) from exc
        diagnostics.append(result.diagnostics())
        if settings.require_convergence and not result.converged:
            raise UpdateAborted(f"{settings.method} influence did not converge at step {step}", trace, diagnostics)
        solve = result.vector
        if policy.mode == "theoretical":
            delta = solve / m
        else:
            norm = np.linalg.norm(solve)
            length = min(policy.gamma, norm / m) if policy.cap_step else policy.gamma
            delta = length * solve / norm if norm > 0 else np.zeros_like(solve)
        values = theta.values.copy()
        values[idx] += delta
        theta = theta.with_values(values)
        report = evaluator(theta, step)
        trace.append(report)
        if policy.stop == "self_acc" and report.self_acc is not None and report.self_acc <= policy.threshold:
            break
        if policy.stop == "best_f1" and report.f1 is not None and report.f1 > best[0]:
            best = (report.f1, theta)
    if policy.stop == "best_f1" and policy.mode != "theoretical":
        theta = best[1]
    return UpdateResult(theta, trace, J, diagnostics)


def _resolve_indices(spec, params, data, selection) -> IndexSet:
    if isinstance(selection, IndexSet):
        return selection
    if selection is None:
        return IndexSet.full(spec.param_count)
    return select_parameters(spec, params, data, selection)


def remove(spec: ModelSpec, params: ParamVector, data: LabeledSet, w, settings: InfluenceSettings,
           selection: SelectionCriterion | IndexSet | None, policy: UpdatePolicy,
           test_set: LabeledSet | None = None, removed_classes: Sequence[int] = ()) -> UpdateResult:
    """Unlearn the rows marked by ``w``.

    ``selection`` is applied once, at the trained parameters, with the
    removed rows as probes. ``original`` always updates every parameter.
    """
    w = np.asarray(w)
    data = data.with_mask(w.astype(np.int64))
    J = IndexSet.full(spec.param_count) if settings.method == "original" else _resolve_indices(spec, params, data, selection)
    removed = data.subset(np.flatnonzero(w))

    def evaluator(p, step):
        return evaluate(spec, p, test_set, removed, removed_classes, step)

    return apply_update(spec, params, data, w, J, settings, policy, None, evaluator)


def perturb(spec: ModelSpec, params: ParamVector, data: LabeledSet, replacement: LabeledSet,
            settings: InfluenceSettings, selection, policy: UpdatePolicy, w=None,
            test_set: LabeledSet | None = None) -> UpdateResult:
    """Swap rows of ``data`` for the matching rows of ``replacement``.

    ``w`` defaults to the rows where input or label differ. The self metrics
    are measured on the old versions of the changed rows, so, as for
    removal, a successful update drives self-accuracy down.
    """
    if replacement.size != data.size:
        raise DomainError("replacement set must have the same length as the data")
    if w is None:
        differs = np.any(data.inputs != replacement.inputs, axis=1)
        lab_a = data.labels.reshape(data.size, -1)
        lab_b = replacement.labels.reshape(data.size, -1)
        w = (differs | np.any(lab_a != lab_b, axis=1)).astype(np.int64)
    w = np.asarray(w)
    data = data.with_mask(w.astype(np.int64))
    J = IndexSet.full(spec.param_count) if settings.method == "original" else _resolve_indices(spec, params, data, selection)
    old_rows = data.subset(np.flatnonzero(w))

    def evaluator(p, step):
        return evaluate(spec, p, test_set, old_rows, (), step)

    return apply_update(spec, params, data, w, J, settings, policy, replacement, evaluator)


def retrain_oracle(spec: ModelSpec, init: ParamVector, data: LabeledSet, config: TrainConfig, w=None,
                   replacement: LabeledSet | None = None) -> ParamVector:
    """Train from ``init`` with the same trainer and seed on the changed data.

    Without ``replacement`` the rows marked by ``w`` are dropped; with it they
    are swapped for the replacement rows (all rows when ``w`` is None).
    """
    if w is None:
        return train(spec, init, data if replacement is None else replacement, config)
    w = np.asarray(w)
    if replacement is None:
        return train(spec, init, data, config, weights=(w == 0).astype(np.int64))
    return train(spec, init, _merge(data, w.astype(np.float64), replacement), config)


# --------------------------------------------------------------------------
# desk-scale studies
# --------------------------------------------------------------------------


@dataclass
class ClassRemovalTask:
    spec: ModelSpec
    train_set: LabeledSet
    test_set: LabeledSet
    params: ParamVector
    init: ParamVector
    removed_class: int
    train_config: TrainConfig

    @property
    def mask(self) -> np.ndarray:
        return (self.train_set.labels == self.removed_class).astype(np.int64)


def blob_task(seed: int = 0, removed_class: int = 0, hidden: int = 16, dim: int = 8, n_classes: int = 10,
              train_per_class: int = 40, test_per_class: int = 40, spread: float = 1.0, center_scale: float = 2.0,
              train_config: TrainConfig | None = None) -> ClassRemovalTask:
    """Train a one-hidden-layer tanh MLP on Gaussian blobs."""
    train_set, test_set = datasets.blob_splits(n_classes, dim, train_per_class, test_per_class, spread,
                                               center_scale, seed_for(seed, "data"))
    spec = ModelSpec.mlp([dim, hidden, n_classes], activation="tanh")
    init = spec.init_params(seed_for(seed, "init"))
    config = train_config or TrainConfig(lr=0.5, epochs=300, batch=0, seed=seed_for(seed, "train"), momentum=0.9)
    params = train(spec, init, train_set, config)
    return ClassRemovalTask(spec, train_set, test_set, params, init, removed_class, config)


def class_removal(task: ClassRemovalTask, settings: InfluenceSettings, selection, policy: UpdatePolicy) -> UpdateResult:
    """Remove every training row of ``task.removed_class``.

    Test loss and accuracy use the retained-class test rows only (see
    :func:`infkit.metrics.evaluate`), so an ideal update keeps them at their
    original values.
    """
    return remove(task.spec, task.params, task.train_set, task.mask, settings, selection, policy,
                  task.test_set, (task.removed_class,))


def selection_study(kinds: Sequence[str], ratios: Sequence[float], seeds: Sequence[int],
                    settings: InfluenceSettings, policy: UpdatePolicy, task_factory=blob_task) -> list[dict]:
    """Final test accuracy after class removal for every (criterion, ratio, seed)."""
    rows = []
    for seed in seeds:
        task = task_factory(seed)
        for ratio in ratios:
            for kind in kinds:
                crit = SelectionCriterion(kind, ratio, seed_for(seed, "selection") if kind == "random" else None)
                try:
                    res = class_removal(task, settings, crit, policy)
                    final = res.trace[-1]
                    rows.append({"seed": seed, "criterion": crit.kind, "ratio": ratio, "test_acc": final.test_acc,
                                 "self_acc": final.self_acc, "steps": len(res.trace) - 1, "aborted": False})
                except UpdateAborted as exc:
                    final = exc.trace[-1]
                    rows.append({"seed": seed, "criterion": crit.kind, "ratio": ratio, "test_acc": final.test_acc,
                                 "self_acc": final.self_acc, "steps": len(exc.trace) - 1, "aborted": True})
    return rows


def constrained_optimum(data: LabeledSet, theta: np.ndarray, J: Sequence[int]) -> np.ndarray:
    """Least-squares values of ``theta_J`` on the rows with ``mask == 0``, other entries fixed.

    ``theta`` is laid out as a linear model: weights then bias.
    """
    keep = data.mask == 0
    A = np.hstack([data.inputs[keep], np.ones((keep.sum(), 1))])
    y = data.labels[keep].astype(np.float64).ravel()
    J = np.asarray(J)
    rest = np.setdiff1d(np.arange(A.shape[1]), J)
    sol, *_ = np.linalg.lstsq(A[:, J], y - A[:, rest] @ theta[rest], rcond=None)
    return sol


def toy_dominance(seed: int, steps: int = 40, gamma: float = 0.01, hessian: str = "plain",
                  anchor: str = "stationary", methods: Sequence[str] = ("gif", "freezing", "projecting")) -> dict:
    """Distance of ``(theta_1, theta_2)`` to the frozen-others optimum after normalized updates.

    Linear regression on :func:`infkit.data.toy_regression`, removing the
    heterogeneous rows, ``J = {0, 1}``; dense solves throughout.
    """
    data, _ = datasets.toy_regression(seed)
    spec = ModelSpec.mlp([data.inputs.shape[1], 1], output_activation="identity", loss_kind="mse")
    A = np.hstack([data.inputs, np.ones((data.size, 1))])
    theta_hat = np.linalg.lstsq(A, data.labels, rcond=None)[0]
    params = ParamVector(theta_hat, spec.layer_map())
    J = IndexSet(np.array([0, 1]), 2 / spec.param_count, "custom")
    target = constrained_optimum(data, theta_hat, J.indices)
    policy = UpdatePolicy("normalized-iterative", gamma, "max_steps", max_steps=steps, anchor=anchor)
    out = {"seed": seed, "start": float(np.linalg.norm(theta_hat[:2] - target))}
    for method in methods:
        settings = InfluenceSettings(method, hessian, "dense")
        res = remove(spec, params, data, data.mask, settings, J, policy)
        out[method] = float(np.linalg.norm(res.params.values[:2] - target))
    return out


# --------------------------------------------------------------------------
# backdoor recovery
# --------------------------------------------------------------------------


@dataclass
class BackdoorTask:
    spec: ModelSpec
    train_set: LabeledSet
    clean_labels: np.ndarray
    poisoned_rows: np.ndarray
    test_set: LabeledSet
    triggered_test: np.ndarray
    params: ParamVector
    init: ParamVector
    bd: datasets.BackdoorSpec
    train_config: TrainConfig

    @property
    def mask(self) -> np.ndarray:
        """Poisoned rows whose label actually changed (true label differs from the backdoor label)."""
        w = np.zeros(self.train_set.size, dtype=np.int64)
        w[self.poisoned_rows] = 1
        return w * (self.clean_labels != self.bd.label)

    @property
    def replacement(self) -> LabeledSet:
        """Poisoned rows keep their triggered images but get their true labels back."""
        return LabeledSet(self.train_set.inputs, self.clean_labels)


@dataclass
class BackdoorReport:
    test: MetricsReport
    bd_true: MetricsReport
    bd_label: MetricsReport

    def accuracies(self) -> dict:
        return {"test_acc": self.test.test_acc, "bd_true_acc": self.bd_true.test_acc,
                "bd_label_acc": self.bd_label.test_acc}


def backdoor_task(seed: int = 0, bd: datasets.BackdoorSpec | None = None, hidden: int = 24, train_per_class: int = 60,
                  test_per_class: int = 30, train_config: TrainConfig | None = None) -> BackdoorTask:
    """Poison 8x8 digits with the checkerboard trigger and train an MLP on them."""
    bd = bd or datasets.BackdoorSpec(seed=seed_for(seed, "backdoor"))
    images, labels = datasets.make_digits(train_per_class + test_per_class, seed=seed_for(seed, "data"))
    is_train = np.arange(len(labels)) % (train_per_class + test_per_class) < train_per_class
    tr_img, tr_lab = images[is_train], labels[is_train]
    te_img, te_lab = images[~is_train], labels[~is_train]
    p_img, p_lab, rows = datasets.poison(tr_img, tr_lab, bd)
    train_set = LabeledSet(datasets.to_features(p_img), p_lab)
    test_set = LabeledSet(datasets.to_features(te_img), te_lab)
    triggered = datasets.to_features(datasets.implant(te_img, bd))
    spec = ModelSpec.mlp([64, hidden, 10], activation="tanh")
    init = spec.init_params(seed_for(seed, "init"))
    config = train_config or TrainConfig(lr=0.5, epochs=400, batch=0, seed=seed_for(seed, "train"), momentum=0.9)
    params = train(spec, init, train_set, config)
    return BackdoorTask(spec, train_set, tr_lab, rows, test_set, triggered, params, init, bd, config)


def backdoor_metrics(task: BackdoorTask, params: ParamVector) -> BackdoorReport:
    true_set = LabeledSet(task.triggered_test, task.test_set.labels)
    bd_set = LabeledSet(task.triggered_test, np.full(task.test_set.size, task.bd.label))
    return BackdoorReport(evaluate(task.spec, params, task.test_set),
                          evaluate(task.spec, params, true_set),
                          evaluate(task.spec, params, bd_set))


def backdoor_recover(task: BackdoorTask, settings: InfluenceSettings, selection, policy: UpdatePolicy) -> tuple[ParamVector, BackdoorReport]:
    """Relabel the poisoned rows with their true labels through an influence update."""
    if not task.mask.any():
        return task.params, backdoor_metrics(task, task.params)
    res = perturb(task.spec, task.params, task.train_set, task.replacement, settings, selection, policy,
                  w=task.mask, test_set=task.test_set)
    return res.params, backdoor_metrics(task, res.params)


def backdoor_oracle(task: BackdoorTask) -> ParamVector:
    """Retrain from scratch on the relabeled data."""
    return retrain_oracle(task.spec, task.init, task.train_set, task.train_config, task.mask, task.replacement)
