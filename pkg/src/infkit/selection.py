"""
Target-parameter selection.

Parameters are ranked inside each tensor of the model and the same fraction
``ratio`` of every tensor is kept, so large layers do not crowd out small
ones. Scores come either from how much a weight contributes to its layer's
output on the probe examples, or from the magnitude of the averaged loss
gradient.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, RefusedError
from .model import LabeledSet, ModelSpec, ParamVector, _check_inputs, _forward_cache, _unpack, grad

logger = logging.getLogger(__name__)

KINDS = ("highest-outputs", "highest-gradients", "lowest-outputs", "lowest-gradients", "random", "full")
ALIASES = {
    "highest-out": "highest-outputs",
    "highest-grad": "highest-gradients",
    "lowest-out": "lowest-outputs",
    "lowest-grad": "lowest-gradients",
}


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise DomainError(f"unknown selection criterion {kind!r}")
    return kind


@dataclass(frozen=True)
class SelectionCriterion:
    kind: str
    ratio: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not 0 < self.ratio <= 1:
            raise DomainError(f"selection ratio must lie in (0, 1], got {self.ratio}")
        if (self.kind == "random") != (self.seed is not None):
            raise DomainError("a seed is required for random selection and only for it")

    @property
    def score_kind(self) -> str | None:
        if self.kind.endswith("outputs"):
            return "outputs"
        if self.kind.endswith("gradients"):
            return "gradients"
        return None


@dataclass(frozen=True)
class IndexSet:
    indices: np.ndarray
    ratio: float
    criterion: str = "full"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise DomainError("an index set must be a non-empty 1-D array")
        if np.any(np.diff(idx) <= 0):
            raise DomainError("indices must be sorted and unique")
        if idx[0] < 0:
            raise DomainError("indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    @classmethod
    def full(cls, n: int) -> "IndexSet":
        return cls(np.arange(n), 1.0, "full")

    def is_full(self, n: int) -> bool:
        return len(self) == n

    def to_dict(self) -> dict:
        return {"indices": self.indices.tolist(), "ratio": self.ratio, "criterion": self.criterion}

    @classmethod
    def from_dict(cls, d: dict) -> "IndexSet":
        return cls(np.asarray(d["indices"]), float(d["ratio"]), d.get("criterion", "full"))


def probe_rows(data: LabeledSet) -> LabeledSet:
    """The upweighted examples, which are the probes used for scoring."""
    rows = np.flatnonzero(data.mask)
    return data.subset(rows) if rows.size else data


def score_parameters(spec: ModelSpec, params: ParamVector, probe_set: LabeledSet, kind: str) -> np.ndarray:
    """Non-negative saliency score per parameter.

    ``outputs``: weight ``W[i, j]`` of a dense layer scores the mean over
    probes of ``|W[i, j] * a[j]|`` where ``a`` is the layer input; bias
    ``b[i]`` scores ``|b[i]|``. ``gradients``: absolute value of the
    probe-averaged loss gradient.
    """
    kind = {"highest-outputs": "outputs", "lowest-outputs": "outputs",
            "highest-gradients": "gradients", "lowest-gradients": "gradients"}.get(kind, kind)
    if kind in ("random", "full"):
        raise RefusedError(f"criterion {kind!r} does not use scores")
    if kind not in ("outputs", "gradients"):
        raise DomainError(f"unknown score kind {kind!r}")
    if probe_set.size == 0:
        raise DomainError("probe set is empty")
    if kind == "gradients":
        return np.abs(grad(spec, params, probe_set, np.full(probe_set.size, 1.0 / probe_set.size)))

    weights = _unpack(spec, params)
    _, acts = _forward_cache(spec, weights, _check_inputs(spec, probe_set.inputs))
    parts = []
    for i, (W, b) in enumerate(weights):
        mean_abs_input = np.abs(acts[i]).mean(axis=0)
        parts.append((np.abs(W) * mean_abs_input[None, :]).ravel())
        parts.append(np.abs(b))
    return np.concatenate(parts)


def _quota(ratio: float, size: int, name: str) -> int:
    q = int(np.floor(ratio * size + 0.5))
    if q < 1:
        warnings.warn(f"ratio {ratio} selects no parameter of {name}; selecting 1", stacklevel=3)
        q = 1
    return min(q, size)


def select(spec: ModelSpec, scores_or_seed, criterion: SelectionCriterion) -> IndexSet:
    """Pick ``round(ratio * size)`` parameters from every tensor.

    ``scores_or_seed`` is the score vector for score-based criteria and is
    ignored otherwise (random selection uses ``criterion.seed``). Ties are
    broken towards the lower flat index.
    """
    n = spec.param_count
    if criterion.kind == "full":
        return IndexSet.full(n)
    chosen = []
    if criterion.kind == "random":
        rng = np.random.default_rng(criterion.seed)
        for slot in spec.layer_map():
            q = _quota(criterion.ratio, slot.size, slot.name)
            chosen.append(slot.offset + rng.choice(slot.size, size=q, replace=False))
    else:
        scores = np.asarray(scores_or_seed, dtype=np.float64)
        if scores.shape != (n,):
            raise DomainError(f"expected {n} scores, got shape {scores.shape}")
        sign = -1.0 if criterion.kind.startswith("highest") else 1.0
        for slot in spec.layer_map():
            q = _quota(criterion.ratio, slot.size, slot.name)
            local = scores[slot.offset:slot.stop]
            order = np.lexsort((np.arange(slot.size), sign * local))
            chosen.append(slot.offset + order[:q])
    return IndexSet(np.sort(np.concatenate(chosen)), criterion.ratio, criterion.kind)


def select_parameters(spec: ModelSpec, params: ParamVector, data: LabeledSet,
                      criterion: SelectionCriterion) -> IndexSet:
    """Score on the upweighted probes (when needed) and select."""
    if criterion.score_kind is None:
        return select(spec, None, criterion)
    scores = score_parameters(spec, params, probe_rows(data), criterion.score_kind)
    return select(spec, scores, criterion)
