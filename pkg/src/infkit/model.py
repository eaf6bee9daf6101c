"""
Small differentiable models and their second-order primitives.

Models are stacks of dense layers stored in one flat float64 parameter
vector. Gradients come from a hand-written backward pass; Hessian-vector
products use Pearlmutter's R-operator, i.e. the directional derivative of
the backward pass (forward-over-reverse). Everything is batched over
examples with numpy and reduced in index order, so results are
bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, RefusedError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
LOSSES = ("mse", "cross-entropy")
DENSE_HESSIAN_CAP = 2000


# --------------------------------------------------------------------------
# activations: value, first and second derivative as functions of the input
# --------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return _sigmoid(z)


def _act_d1(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    s = _sigmoid(z)
    return s * (1.0 - s)


def _act_d2(kind: str, z: np.ndarray) -> np.ndarray:
    if kind in ("identity", "relu"):
        return np.zeros_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    s = _sigmoid(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseLayer:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise DomainError("layer dimensions must be positive")

    @property
    def param_count(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


@dataclass(frozen=True)
class LayerSlot:
    """Location of one named tensor inside a flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and loss of a multilayer perceptron.

    Each dense layer ``i`` owns two tensors, ``dense{i}.weight`` with shape
    ``(out, in)`` and ``dense{i}.bias`` with shape ``(out,)``, laid out in
    that order.
    """

    layers: tuple[DenseLayer, ...]
    loss_kind: str = "cross-entropy"
    l2_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DomainError("a model needs at least one layer")
        if self.loss_kind not in LOSSES:
            raise DomainError(f"unknown loss {self.loss_kind!r}; expected one of {LOSSES}")
        if not self.l2_weight >= 0:
            raise DomainError("l2_weight must be >= 0")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not compose: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def mlp(cls, sizes: Sequence[int], activation: str = "tanh", output_activation: str = "identity",
            loss_kind: str = "cross-entropy", l2_weight: float = 0.0) -> "ModelSpec":
        """Build a fully connected network from a list of widths."""
        layers = []
        for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(DenseLayer(din, dout, output_activation if last else activation))
        return cls(tuple(layers), loss_kind, l2_weight)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def layer_map(self) -> tuple[LayerSlot, ...]:
        slots = []
        offset = 0
        for i, layer in enumerate(self.layers):
            slots.append(LayerSlot(f"dense{i}.weight", offset, (layer.out_dim, layer.in_dim)))
            offset += layer.out_dim * layer.in_dim
            slots.append(LayerSlot(f"dense{i}.bias", offset, (layer.out_dim,)))
            offset += layer.out_dim
        return tuple(slots)

    def init_params(self, seed: int = 0) -> "ParamVector":
        """Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)
        values = np.zeros(self.param_count)
        for slot in self.layer_map():
            if slot.name.endswith(".weight"):
                fan_out, fan_in = slot.shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                values[slot.offset:slot.stop] = rng.uniform(-limit, limit, slot.size)
        return ParamVector(values, self.layer_map())

    def with_l2(self, l2_weight: float) -> "ModelSpec":
        return replace(self, l2_weight=l2_weight)

    def to_dict(self) -> dict:
        return {
            "layers": [[l.in_dim, l.out_dim, l.activation] for l in self.layers],
            "loss_kind": self.loss_kind,
            "l2_weight": self.l2_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(DenseLayer(int(a), int(b), str(c)) for a, b, c in d["layers"]),
                   d.get("loss_kind", "cross-entropy"), float(d.get("l2_weight", 0.0)))


@dataclass
class ParamVector:
    """Flat parameter vector with its tensor layout."""

    values: np.ndarray
    layer_map: tuple[LayerSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layer_map = tuple(self.layer_map)
        offset = 0
        for slot in self.layer_map:
            if slot.offset != offset:
                raise ShapeError(f"layer map is not contiguous at {slot.name}")
            offset = slot.stop
        if self.values.shape != (offset,):
            raise ShapeError(f"expected {offset} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector has non-finite entries")

    @property
    def n(self) -> int:
        return self.values.size

    def tensor(self, name: str) -> np.ndarray:
        for slot in self.layer_map:
            if slot.name == name:
                return self.values[slot.offset:slot.stop].reshape(slot.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layer_map)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values.copy())


@dataclass
class LabeledSet:
    """Examples, labels and the binary upweight mask ``w``.

    Labels are class indices for cross-entropy models and real targets of
    shape ``(m,)`` or ``(m, out_dim)`` for mse models.
    """

    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.labels = np.asarray(self.labels)
        m = self.inputs.shape[0]
        if self.labels.shape[0] != m:
            raise ShapeError(f"{m} inputs but {self.labels.shape[0]} labels")
        if self.mask is None:
            self.mask = np.zeros(m, dtype=np.int64)
        self.mask = np.asarray(self.mask)
        if self.mask.shape != (m,):
            raise ShapeError(f"mask must have shape ({m},)")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DomainError("upweight mask must be binary")
        self.mask = self.mask.astype(np.int64)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index) -> "LabeledSet":
        index = np.asarray(index)
        return LabeledSet(self.inputs[index], self.labels[index], self.mask[index])

    def with_mask(self, mask) -> "LabeledSet":
        return LabeledSet(self.inputs, self.labels, mask)

    def with_labels(self, labels) -> "LabeledSet":
        return LabeledSet(self.inputs, labels, self.mask)


@dataclass(frozen=True)
class BatchSample:
    indices: tuple[int, ...]
    seed: int

    @classmethod
    def draw(cls, m: int, t: int, seed: int) -> "BatchSample":
        """Uniformly draw ``t`` distinct rows out of ``m``."""
        if not 0 < t <= m:
            raise DomainError(f"sample size {t} not in (0, {m}]")
        rng = np.random.default_rng(seed)
        return cls(tuple(int(i) for i in np.sort(rng.choice(m, size=t, replace=False))), seed)

    def weights(self, m: int) -> np.ndarray:
        w = np.zeros(m)
        w[list(self.indices)] = 1.0
        return w


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _unpack(spec: ModelSpec, params: ParamVector | np.ndarray):
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    if values.shape != (spec.param_count,):
        raise ShapeError(f"model has {spec.param_count} parameters, got {values.shape}")
    out = []
    offset = 0
    for layer in spec.layers:
        nw = layer.out_dim * layer.in_dim
        W = values[offset:offset + nw].reshape(layer.out_dim, layer.in_dim)
        offset += nw
        b = values[offset:offset + layer.out_dim]
        offset += layer.out_dim
        out.append((W, b))
    return out


def _check_inputs(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.in_dim:
        raise ShapeError(f"input has {X.shape[1]} features, model expects {spec.in_dim}")
    return X


def _finite(arr: np.ndarray, what: str, layer: int):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}", layer=f"dense{layer}")


def _forward_cache(spec, weights, X):
    acts = [X]
    zs = []
    for i, (layer, (W, b)) in enumerate(zip(spec.layers, weights)):
        z = acts[-1] @ W.T + b
        _finite(z, "pre-activation", i)
        zs.append(z)
        acts.append(_act(layer.activation, z))
    return zs, acts


def forward(spec: ModelSpec, params: ParamVector | np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Network output (logits for cross-entropy models).

    A 1-D input returns a 1-D output; a 2-D batch returns one row per example.
    """
    single = np.ndim(inputs) == 1
    X = _check_inputs(spec, inputs)
    _, acts = _forward_cache(spec, _unpack(spec, params), X)
    return acts[-1][0] if single else acts[-1]


def _targets(spec: ModelSpec, labels: np.ndarray, m: int) -> np.ndarray:
    labels = np.asarray(labels)
    if spec.loss_kind == "cross-entropy":
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer) and not np.all(labels == np.round(labels)):
            raise DomainError("cross-entropy labels must be integer class indices")
        labels = labels.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= spec.out_dim):
            raise DomainError(f"class index outside [0, {spec.out_dim})")
        return labels
    Y = labels.astype(np.float64).reshape(m, -1)
    if Y.shape[1] != spec.out_dim:
        raise ShapeError(f"mse targets have width {Y.shape[1]}, model outputs {spec.out_dim}")
    return Y


def _softmax(out):
    shifted = out - out.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _per_example_loss(spec, out, Y):
    if spec.loss_kind == "mse":
        return ((out - Y) ** 2).sum(axis=1)
    mx = out.max(axis=1)
    lse = mx + np.log(np.exp(out - mx[:, None]).sum(axis=1))
    return lse - out[np.arange(out.shape[0]), Y]


def losses(spec: ModelSpec, params: ParamVector | np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example unregularized losses."""
    X = _check_inputs(spec, inputs)
    Y = _targets(spec, np.atleast_1d(labels), X.shape[0])
    _, acts = _forward_cache(spec, _unpack(spec, params), X)
    return _per_example_loss(spec, acts[-1], Y)


def loss(spec: ModelSpec, params: ParamVector | np.ndarray, example: tuple, regularized: bool = False) -> float:
    """Loss of a single ``(input, label)`` example.

    mse is ``sum_k (out_k - y_k)**2``; cross-entropy is the negative
    log-softmax of the true class. With ``regularized=True`` the term
    ``l2_weight * ||theta||**2 / 2`` is added.
    """
    x, y = example
    value = float(losses(spec, params, np.atleast_2d(x), np.atleast_1d(y) if spec.loss_kind == "cross-entropy"
                         else np.reshape(y, (1, -1)))[0])
    if regularized and spec.l2_weight > 0:
        theta = params.values if isinstance(params, ParamVector) else np.asarray(params)
        value += 0.5 * spec.l2_weight * float(theta @ theta)
    return value


def _weights_vector(mask, m):
    if mask is None:
        return np.ones(m)
    c = np.asarray(mask, dtype=np.float64)
    if c.shape != (m,):
        raise ShapeError(f"mask must have shape ({m},), got {c.shape}")
    return c


def _output_grad(spec, out, Y, c):
    if spec.loss_kind == "mse":
        g = 2.0 * (out - Y)
    else:
        g = _softmax(out)
        g[np.arange(out.shape[0]), Y] -= 1.0
    return g * c[:, None]


def _flatten(spec, grads) -> np.ndarray:
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def _backward(spec, weights, zs, acts, g_out):
    grads = [None] * len(spec.layers)
    ga = g_out
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        W, _ = weights[i]
        gz = ga * _act_d1(layer.activation, zs[i])
        grads[i] = (gz.T @ acts[i], gz.sum(axis=0))
        ga = gz @ W
    return grads


def grad(spec: ModelSpec, params: ParamVector | np.ndarray, data: LabeledSet, mask=None,
         regularized: bool = False) -> np.ndarray:
    """``sum_i mask_i * grad loss(z_i, theta)`` as a flat vector.

    ``mask`` defaults to all ones and may hold real weights. An all-zero mask
    gives the zero vector (logged at debug level). With ``regularized=True``
    the gradient of ``l2_weight * ||theta||**2 / 2`` is added once.
    """
    weights = _unpack(spec, params)
    c = _weights_vector(mask, data.size)
    out = np.zeros(spec.param_count)
    if not np.any(c):
        logger.debug("grad called with an empty effective batch")
    else:
        Y = _targets(spec, data.labels, data.size)
        zs, acts = _forward_cache(spec, weights, data.inputs)
        out = _flatten(spec, _backward(spec, weights, zs, acts, _output_grad(spec, acts[-1], Y, c)))
    if regularized and spec.l2_weight > 0:
        out = out + spec.l2_weight * _theta(params)
    return out


def _theta(params):
    return params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)


def per_example_grads(spec: ModelSpec, params: ParamVector | np.ndarray, data: LabeledSet) -> np.ndarray:
    """Matrix of per-example gradients, shape ``(m, n)``."""
    weights = _unpack(spec, params)
    Y = _targets(spec, data.labels, data.size)
    zs, acts = _forward_cache(spec, weights, data.inputs)
    ga = _output_grad(spec, acts[-1], Y, np.ones(data.size))
    blocks = [None] * len(spec.layers)
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        gz = ga * _act_d1(layer.activation, zs[i])
        gW = gz[:, :, None] * acts[i][:, None, :]
        blocks[i] = np.concatenate([gW.reshape(data.size, -1), gz], axis=1)
        ga = gz @ weights[i][0]
    return np.concatenate(blocks, axis=1)


def hvp(spec: ModelSpec, params: ParamVector | np.ndarray, data: LabeledSet, mask, v: np.ndarray,
        regularized: bool = False) -> np.ndarray:
    """Hessian-vector product ``H v`` with ``H = sum_i mask_i Hess loss(z_i, theta)``.

    Computed with Pearlmutter's R-operator: a forward pass of directional
    derivatives followed by the directional derivative of the backward pass.
    ``regularized=True`` adds ``l2_weight * v``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.param_count,):
        raise ShapeError(f"v must have shape ({spec.param_count},), got {v.shape}")
    weights = _unpack(spec, params)
    dirs = _unpack(spec, v)
    c = _weights_vector(mask, data.size)
    result = np.zeros(spec.param_count)
    if np.any(c):
        Y = _targets(spec, data.labels, data.size)
        zs, acts = _forward_cache(spec, weights, data.inputs)

        # R-forward: directional derivatives of pre-activations and activations
        r_acts = [np.zeros_like(data.inputs)]
        r_zs = []
        for i, layer in enumerate(spec.layers):
            W, _ = weights[i]
            VW, Vb = dirs[i]
            rz = acts[i] @ VW.T + r_acts[i] @ W.T + Vb
            r_zs.append(rz)
            r_acts.append(_act_d1(layer.activation, zs[i]) * rz)

        out = acts[-1]
        ga = _output_grad(spec, out, Y, c)
        if spec.loss_kind == "mse":
            r_ga = 2.0 * r_acts[-1] * c[:, None]
        else:
            p = _softmax(out)
            ra = r_acts[-1]
            r_ga = (p * ra - p * (p * ra).sum(axis=1, keepdims=True)) * c[:, None]

        blocks = [None] * len(spec.layers)
        for i in reversed(range(len(spec.layers))):
            layer = spec.layers[i]
            W, _ = weights[i]
            VW, _ = dirs[i]
            d1 = _act_d1(layer.activation, zs[i])
            gz = ga * d1
            r_gz = r_ga * d1 + ga * _act_d2(layer.activation, zs[i]) * r_zs[i]
            blocks[i] = (r_gz.T @ acts[i] + gz.T @ r_acts[i], r_gz.sum(axis=0))
            _finite(blocks[i][0], "hessian-vector product", i)
            ga = gz @ W
            r_ga = r_gz @ W + gz @ VW
        result = _flatten(spec, blocks)
    if regularized and spec.l2_weight > 0:
        result = result + spec.l2_weight * v
    return result


def hvp_batch(spec: ModelSpec, params: ParamVector | np.ndarray, data: LabeledSet, mask, V: np.ndarray,
              regularized: bool = False) -> np.ndarray:
    """``H @ V`` for a block of directions ``V`` of shape ``(n, k)``.

    Same R-operator as :func:`hvp` with an extra leading direction axis, so
    the work runs as matrix products; callers chunk ``k`` to bound memory
    (``k * m * width`` floats per layer).
    """
    V = np.asarray(V, dtype=np.float64)
    n = spec.param_count
    if V.ndim != 2 or V.shape[0] != n:
        raise ShapeError(f"V must have shape ({n}, k), got {V.shape}")
    k = V.shape[1]
    weights = _unpack(spec, params)
    c = _weights_vector(mask, data.size)
    result = np.zeros((n, k))
    if np.any(c) and k:
        dirs = []
        offset = 0
        for layer in spec.layers:
            nw = layer.out_dim * layer.in_dim
            dirs.append((V[offset:offset + nw].T.reshape(k, layer.out_dim, layer.in_dim),
                         V[offset + nw:offset + nw + layer.out_dim].T))
            offset += nw + layer.out_dim
        Y = _targets(spec, data.labels, data.size)
        zs, acts = _forward_cache(spec, weights, data.inputs)

        m = data.size
        # r_acts[0] is identically zero (inputs do not depend on theta)
        r_acts = [None]
        r_zs = []
        for i, layer in enumerate(spec.layers):
            W, _ = weights[i]
            VW, Vb = dirs[i]
            rz = (VW.reshape(-1, layer.in_dim) @ acts[i].T).reshape(k, layer.out_dim, m).transpose(0, 2, 1)
            if r_acts[i] is not None:
                rz = rz + (r_acts[i].reshape(k * m, -1) @ W.T).reshape(k, m, layer.out_dim)
            rz = rz + Vb[:, None, :]
            r_zs.append(rz)
            r_acts.append(_act_d1(layer.activation, zs[i]) * rz)

        out = acts[-1]
        ga = _output_grad(spec, out, Y, c)
        if spec.loss_kind == "mse":
            r_ga = 2.0 * r_acts[-1] * c[:, None]
        else:
            p = _softmax(out)
            ra = r_acts[-1]
            r_ga = (p * ra - p * (p * ra).sum(axis=2, keepdims=True)) * c[:, None]

        blocks = [None] * len(spec.layers)
        for i in reversed(range(len(spec.layers))):
            layer = spec.layers[i]
            W, _ = weights[i]
            VW, _ = dirs[i]
            d1 = _act_d1(layer.activation, zs[i])
            gz = ga * d1
            r_gz = r_ga * d1 + ga * _act_d2(layer.activation, zs[i]) * r_zs[i]
            n_in, n_out = layer.in_dim, layer.out_dim
            bW = (r_gz.transpose(0, 2, 1).reshape(k * n_out, m) @ acts[i]).reshape(k, n_out, n_in)
            if r_acts[i] is not None:
                flat = r_acts[i].transpose(1, 0, 2).reshape(m, k * n_in)
                bW = bW + (gz.T @ flat).reshape(n_out, k, n_in).transpose(1, 0, 2)
            blocks[i] = np.concatenate([bW.reshape(k, -1), r_gz.sum(axis=1)], axis=1)
            _finite(blocks[i], "hessian-vector product", i)
            if i == 0:
                break
            ga = gz @ W
            r_ga = (r_gz.reshape(k * m, n_out) @ W).reshape(k, m, n_in)
            r_ga = r_ga + (gz @ VW.transpose(1, 0, 2).reshape(n_out, k * n_in)).reshape(m, k, n_in).transpose(1, 0, 2)
        result = np.concatenate(blocks, axis=1).T
    if regularized and spec.l2_weight > 0:
        result = result + spec.l2_weight * V
    return result


def dense_hessian(spec: ModelSpec, params: ParamVector | np.ndarray, data: LabeledSet, mask=None,
                  regularized: bool = False, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
    """Explicit Hessian built column by column from ``n`` HVPs, then symmetrized."""
    n = spec.param_count
    if n > cap:
        raise RefusedError(f"dense Hessian of {n} parameters exceeds the cap of {cap}; "
                           "use hvp-based solvers or raise the cap explicitly")
    H = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        H[:, j] = hvp(spec, params, data, mask, e, regularized=regularized)
        e[j] = 0.0
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Minibatch SGD with momentum.

    ``schedule`` is ``constant``, ``step`` (multiply by ``gamma`` at each of
    ``milestones``) or ``cosine``. ``batch <= 0`` means full batch.
    """

    lr: float = 0.1
    epochs: int = 100
    batch: int = 0
    seed: int = 0
    schedule: str = "constant"
    momentum: float = 0.0
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "step":
            return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * epoch / max(self.epochs, 1)))
        raise DomainError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    grad_norm: float = float("nan")


def objective_grad(spec: ModelSpec, params, data: LabeledSet, weights=None) -> np.ndarray:
    """Gradient of the training objective: mean loss plus the L2 term."""
    c = np.ones(data.size) if weights is None else np.asarray(weights, dtype=np.float64)
    return grad(spec, params, data, c / c.sum(), regularized=True)


def train(spec: ModelSpec, init: ParamVector, data: LabeledSet, config: TrainConfig,
          log: TrainLog | None = None, weights=None) -> ParamVector:
    """Minimize the mean loss (plus ``l2_weight * ||theta||**2 / 2``) with SGD.

    ``weights`` restricts training to a subset of rows (0/1 per example)
    without changing batch composition of the remaining rows' shuffles.
    The final full-batch gradient norm is written to ``log.grad_norm``.
    """
    theta = init.values.copy()
    if not np.all(np.isfinite(theta)):
        raise NumericError("non-finite initial parameters")
    keep = np.arange(data.size) if weights is None else np.flatnonzero(np.asarray(weights))
    sub = data.subset(keep)
    m = sub.size
    batch = m if config.batch <= 0 else min(config.batch, m)
    rng = np.random.default_rng(config.seed)
    velocity = np.zeros_like(theta)
    for epoch in range(config.epochs):
        order = np.arange(m) if batch == m else rng.permutation(m)
        lr = config.lr_at(epoch)
        for start in range(0, m, batch):
            idx = order[start:start + batch]
            part = sub.subset(idx)
            try:
                g = grad(spec, theta, part, np.full(idx.size, 1.0 / idx.size), regularized=True)
            except NumericError as exc:
                raise TrainingError(f"training diverged ({exc})", epoch) from exc
            velocity = config.momentum * velocity + g
            theta = theta - lr * velocity
        if not np.all(np.isfinite(theta)):
            raise TrainingError("training diverged (non-finite parameters)", epoch)
        if log is not None:
            value = float(losses(spec, theta, sub.inputs, sub.labels).mean())
            if not np.isfinite(value):
                raise TrainingError("training loss became non-finite", epoch)
            log.losses.append(value)
    grad_norm = float(np.linalg.norm(objective_grad(spec, theta, sub)))
    if log is not None:
        log.grad_norm = grad_norm
    logger.debug("training finished: %d epochs, |grad| = %.3e", config.epochs, grad_norm)
    return init.with_values(theta)


def predict(spec: ModelSpec, params, inputs: np.ndarray) -> np.ndarray:
    """Argmax class predictions."""
    return np.argmax(forward(spec, params, np.atleast_2d(inputs)), axis=1)


HvpOperator = Callable[[np.ndarray], np.ndarray]
