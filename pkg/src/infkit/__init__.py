"""Influence functions restricted to a parameter subset, for unlearning small models."""

from .errors import (ConfigError, ConvergenceError, DomainError, InfkitError, NumericError, RefusedError,
                     ShapeError, SingularError, TrainingError)
from .influence import (HessianOperator, InfluenceResult, LissaConfig, compute_influence, exact_gif,
                        exact_influence, gif_influence, influence_score, lissa_gif, lissa_original)
from .model import (BatchSample, LabeledSet, ModelSpec, ParamVector, TrainConfig, dense_hessian, forward, grad,
                    hvp, loss, train)
from .selection import IndexSet, SelectionCriterion, select_parameters
from .spectral import lanczos_topk, negative_rate_sweep

__version__ = "0.1.0"
