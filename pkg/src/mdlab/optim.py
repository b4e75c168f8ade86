"""SGD-with-momentum and Adam over named parameter maps.

The learning rate anneals as ``lr_t = lr_0 / (1 + decay * t)`` where ``t`` is
the number of steps already taken.  Parameters whose ``requires_grad`` flag is
off are frozen: the optimizer discards any gradient offered for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

KINDS = ("sgd-momentum", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.decay < 0:
            raise ConfigError("decay must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam constants")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimizerState:
    """Optimizer hyperparameters plus per-parameter moment buffers."""

    config: OptimizerConfig
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.config.kind

    def effective_lr(self, step: int | None = None) -> float:
        t = self.step_count if step is None else step
        return self.config.learning_rate / (1.0 + self.config.decay * t)


def make_optimizer(kind: str = "sgd-momentum", **kwargs) -> OptimizerState:
    return OptimizerState(OptimizerConfig(kind=kind, **kwargs))


def optimizer_step(
    state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]
) -> Mapping[str, Tensor]:
    """Update every trainable parameter in ``params`` from ``grads``.

    Arrays are replaced rather than mutated, so snapshots taken earlier never
    change.  ``step_count`` is incremented even when every parameter is frozen.
    """
    cfg = state.config
    lr = state.effective_lr()
    t = state.step_count + 1
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if name not in grads:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        if cfg.kind == "sgd-momentum":
            v = state.first_moment.get(name)
            v = g if v is None or cfg.momentum == 0 else cfg.momentum * v + g
            state.first_moment[name] = v
            p.data = p.data - lr * v
        else:
            m = state.first_moment.get(name, np.zeros_like(g))
            s = state.second_moment.get(name, np.zeros_like(g))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            s = cfg.beta2 * s + (1 - cfg.beta2) * g * g
            state.first_moment[name] = m
            state.second_moment[name] = s
            m_hat = m / (1 - cfg.beta1**t)
            s_hat = s / (1 - cfg.beta2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(s_hat) + cfg.eps)
    state.step_count = t
    return params
