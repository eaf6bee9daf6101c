"""
Run configuration: a TOML file with the sections ``model``, ``data``,
``train``, ``selection``, ``influence``, ``update`` and ``eval``.

Every key has a default; unknown sections or keys are rejected so a typo
never silently falls back to a default. See the README for the key list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .experiments import InfluenceSettings, UpdatePolicy
from .influence import LissaConfig
from .model import ModelSpec, TrainConfig
from .selection import SelectionCriterion, canonical_kind


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=lambda: [16])
    activation: str = "tanh"
    output_activation: str = "identity"
    loss: str = "cross-entropy"
    l2: float = 0.0


@dataclass
class DataSection:
    kind: str = "blobs"  # blobs | digits | toy-regression | csv
    n_classes: int = 10
    dim: int = 8
    train_per_class: int = 40
    test_per_class: int = 40
    spread: float = 1.0
    center_scale: float = 2.0
    removed_class: int = 0
    # relabeling for ``perturb``: a fraction of ``relabel_from`` rows becomes ``relabel_to``
    relabel_from: int = 1
    relabel_to: int = 7
    relabel_fraction: float = 0.5
    # backdoor
    poison_fraction: float = 0.3
    bd_label: int = 0
    bd_amplitude: float = 16.0
    # external CSV sets
    train_path: str = ""
    test_path: str = ""
    pixel_scale: float = 255.0


@dataclass
class TrainSection:
    lr: float = 0.5
    epochs: int = 300
    batch: int = 0
    schedule: str = "constant"
    momentum: float = 0.9
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1


@dataclass
class SelectionSection:
    criterion: str = "highest-gradients"
    ratio: float = 0.05


@dataclass
class InfluenceSection:
    method: str = "gif"
    hessian: str = "plain"
    solver: str = "dense"
    regularized: bool = False
    max_iters: int = 10000
    tol: float = 1e-10
    mu: float = 10.0
    scale: float = 1.0
    samples: int = 0
    window: int = 5
    growth: float = 10.0
    max_restarts: int = 20
    rescale: bool = True
    require_convergence: bool = True
    cap: int = 2000


@dataclass
class UpdateSection:
    mode: str = "normalized-iterative"
    gamma: float = 0.03
    stop: str = "self_acc"
    threshold: float = 0.4
    max_steps: int = 50
    anchor: str = "stationary"
    cap_step: bool = False


@dataclass
class EvalSection:
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.1])
    top_k: int = 20
    lanczos_iters: int = 0
    seeds: int = 5
    test_rows: list[int] = field(default_factory=lambda: [0])


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "train": TrainSection,
    "selection": SelectionSection,
    "influence": InfluenceSection,
    "update": UpdateSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    update: UpdateSection = field(default_factory=UpdateSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- builders -------------------------------------------------------------

    def model_spec(self, in_dim: int, out_dim: int) -> ModelSpec:
        m = self.model
        return ModelSpec.mlp([in_dim, *m.hidden, out_dim], activation=m.activation,
                             output_activation=m.output_activation, loss_kind=m.loss, l2_weight=m.l2)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, epochs=t.epochs, batch=t.batch, seed=seed, schedule=t.schedule,
                           momentum=t.momentum, milestones=tuple(t.milestones), gamma=t.gamma)

    def criterion(self, seed: int) -> SelectionCriterion:
        s = self.selection
        kind = canonical_kind(s.criterion)
        return SelectionCriterion(kind, s.ratio, seed if kind == "random" else None)

    def lissa(self, seed: int) -> LissaConfig:
        i = self.influence
        return LissaConfig(max_iters=i.max_iters, tol=i.tol, mu=i.mu, scale=i.scale, samples=i.samples or None,
                           window=i.window, growth=i.growth, max_restarts=i.max_restarts, rescale=i.rescale,
                           seed=seed)

    def influence_settings(self, seed: int) -> InfluenceSettings:
        i = self.influence
        return InfluenceSettings(i.method, i.hessian, i.solver, self.lissa(seed), i.regularized, i.cap,
                                 i.require_convergence)

    def policy(self) -> UpdatePolicy:
        u = self.update
        return UpdatePolicy(u.mode, u.gamma, u.stop, u.threshold, u.max_steps, u.anchor, u.cap_step)


def _coerce(section: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    defaults = cls()
    values = {}
    for key, value in raw.items():
        expected = getattr(defaults, key)
        if isinstance(expected, bool):
            ok = isinstance(value, bool)
        elif isinstance(expected, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(expected, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(expected, str):
            ok = isinstance(value, str)
        else:
            ok = isinstance(value, list)
        if not ok:
            raise ConfigError(f"[{section}] {key}: expected {type(expected).__name__}, got {value!r}")
        values[key] = value
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _coerce(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()})


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Parse a TOML file (or string); no path and no text gives the defaults."""
    if path is None and text is None:
        return RunConfig()
    try:
        raw = tomllib.loads(text) if text is not None else tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return config_from_dict(raw)
