"""Evaluation metrics for removal and recovery runs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import LabeledSet, ModelSpec, ParamVector, forward, losses

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """Losses are sums over examples; accuracies are percentages.

    ``histogram[c]`` counts removed examples predicted as class ``c``.
    Self metrics are ``None`` (and ``flags`` says why) when the removed
    set is empty.
    """

    test_loss: float | None = None
    test_acc: float | None = None
    self_loss: float | None = None
    self_acc: float | None = None
    f1: float | None = None
    histogram: list[int] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    step: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(spec: ModelSpec, params, data: LabeledSet) -> float:
    pred = np.argmax(forward(spec, params, data.inputs), axis=1)
    return 100.0 * float(np.mean(pred == data.labels))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, classes: Sequence[int]) -> float:
    """Mean over ``classes`` of the per-class F1.

    Examples whose true label is outside ``classes`` never count as
    positives, but predicting one of ``classes`` for them is a false positive.
    A class with no true and no predicted examples scores 0.
    """
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else float("nan")


def evaluate(spec: ModelSpec, params: ParamVector, test_set: LabeledSet | None,
             removed_set: LabeledSet | None = None, removed_classes: Sequence[int] = (), step: int = 0) -> MetricsReport:
    """Test and self metrics.

    With ``removed_classes`` given, test loss and accuracy cover only the
    test rows of the retained classes, so an ideal removal keeps them at
    their original values. F1 is macro-averaged over the retained classes
    and computed on the whole test set.
    """
    rep = MetricsReport(step=step)
    classify = spec.loss_kind == "cross-entropy"
    if test_set is not None and test_set.size:
        removed = set(removed_classes)
        kept_rows = ~np.isin(test_set.labels, list(removed)) if removed else np.ones(test_set.size, dtype=bool)
        if not kept_rows.any():
            kept_rows[:] = True
        out = forward(spec, params, test_set.inputs)
        rep.test_loss = float(losses(spec, params, test_set.inputs[kept_rows], test_set.labels[kept_rows]).sum())
        if classify:
            pred = np.argmax(out, axis=1)
            rep.test_acc = 100.0 * float(np.mean(pred[kept_rows] == test_set.labels[kept_rows]))
            kept = [c for c in range(spec.out_dim) if c not in removed]
            rep.f1 = macro_f1(test_set.labels, pred, kept)
    else:
        rep.flags.append("no test set")
    if removed_set is not None and removed_set.size:
        rep.self_loss = float(losses(spec, params, removed_set.inputs, removed_set.labels).sum())
        if classify:
            pred = np.argmax(forward(spec, params, removed_set.inputs), axis=1)
            rep.self_acc = 100.0 * float(np.mean(pred == removed_set.labels))
            rep.histogram = np.bincount(pred, minlength=spec.out_dim).astype(int).tolist()
    else:
        rep.flags.append("empty removed set: self metrics omitted")
    return rep
