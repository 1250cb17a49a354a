"""SGD, SGD with momentum and Adam as pure state transitions.

Momentum convention: ``M' = (1 - beta) G + beta M`` and ``theta' = theta - lr * M'``.

Adam (default, ``bias_correction=False``) divides the raw moments by the one-step
factors ``1 - beta1`` and ``1 - beta2``::

    m' = beta1 m + (1 - beta1) G
    v' = beta2 v + (1 - beta2) G**2
    theta' = theta - lr * (m' / (1 - beta1)) / (sqrt(v' / (1 - beta2)) + eps)

This is exactly the form that the general-learning-rate rewrite
``theta' = theta - lr_star * ((1 - beta1) G + beta1 m)`` with
``lr_star = lr / ((1 - beta1) (sqrt(G**2 + beta2 / (1 - beta2) v) + eps))`` reproduces.
``bias_correction=True`` gives textbook Adam instead and is not covered by that identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Callable

import numpy as np


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # sgd | sgd_momentum | adam
    lr: float = 0.1
    schedule: str = "constant"  # constant | step
    decay_factor: float = 1.0
    decay_every: int = 1
    beta: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = False

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum", "adam"):
            raise OptimizerError(f"unknown optimizer {self.kind!r}")
        if not 0 < self.lr <= 1:
            raise OptimizerError("learning rate must lie in (0, 1]")
        if self.schedule not in ("constant", "step"):
            raise OptimizerError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise OptimizerError("step decay needs 0 < decay_factor <= 1 and decay_every >= 1")
        if not (0 <= self.beta < 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimizerError("momentum weights must lie in [0, 1)")
        if self.eps <= 0:
            raise OptimizerError("eps must be > 0")

    def lr_at(self, t: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * self.decay_factor ** (t // self.decay_every)

    @property
    def momentum(self) -> float:
        """The weight of the first-moment buffer: ``beta`` or ``beta1``; 0 for plain sgd."""
        if self.kind == "sgd_momentum":
            return self.beta
        if self.kind == "adam":
            return self.beta1
        return 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


@dataclass(frozen=True)
class OptimizerState:
    t: int
    M: np.ndarray | None = None
    V: np.ndarray | None = None


def init_state(cfg: OptimizerConfig, p: int) -> OptimizerState:
    if cfg.kind == "sgd":
        return OptimizerState(0)
    if cfg.kind == "sgd_momentum":
        return OptimizerState(0, np.zeros(p))
    return OptimizerState(0, np.zeros(p), np.zeros(p))


def step(
    cfg: OptimizerConfig, state: OptimizerState, theta: np.ndarray, G: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    if theta.shape != G.shape:
        raise OptimizerError("gradient and parameters differ in shape")
    if not np.all(np.isfinite(G)):
        raise OptimizerError("non-finite gradient")
    lr = cfg.lr_at(state.t)
    if cfg.kind == "sgd":
        return theta - lr * G, replace(state, t=state.t + 1)
    if cfg.kind == "sgd_momentum":
        m = (1 - cfg.beta) * G + cfg.beta * state.M
        return theta - lr * m, OptimizerState(state.t + 1, m)
    b1, b2 = cfg.beta1, cfg.beta2
    m = (1 - b1) * G + b1 * state.M
    v = b2 * state.V + (1 - b2) * G * G
    if cfg.bias_correction:
        m_hat = m / (1 - b1 ** (state.t + 1))
        v_hat = v / (1 - b2 ** (state.t + 1))
    else:
        m_hat = m / (1 - b1)
        v_hat = v / (1 - b2)
    return theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps), OptimizerState(state.t + 1, m, v)


def adam_general_lr(cfg: OptimizerConfig, state: OptimizerState, G: np.ndarray) -> np.ndarray:
    """Per-coordinate rate ``lr_star`` that rewrites the Adam step in momentum-SGD form."""
    if cfg.kind != "adam":
        raise OptimizerError("general learning rate is defined for adam only")
    v_hat = G * G + (cfg.beta2 / (1 - cfg.beta2)) * state.V
    return cfg.lr_at(state.t) / ((1 - cfg.beta1) * (np.sqrt(v_hat) + cfg.eps))


def decimal_fraction(x: float) -> Fraction:
    """The rational a float prints as (``0.1`` -> 1/10); keeps scalar coefficients correctly rounded."""
    return Fraction(repr(float(x)))


def alpha_coeff(
    cfg: OptimizerConfig,
    k: int,
    t: int,
    N: int,
    lr_of: Callable[[int], float | np.ndarray] | None = None,
):
    """Trajectory coefficient linking step ``k`` to step ``t``.

    Plain sgd: ``-(lr_t lr_k)**2 / N``.  Momentum and Adam:
    ``(1/N) * prod_{k<a<t}(lr_a beta1) * lr_k * (1 - beta1)``, where for Adam
    ``lr_of`` must return the general learning rate vectors.
    """
    if k > t or k < 0:
        raise OptimizerError("alpha_coeff needs 0 <= k <= t")
    lr_of = lr_of or cfg.lr_at
    if cfg.kind == "sgd":
        return float(-((decimal_fraction(lr_of(t)) * decimal_fraction(lr_of(k))) ** 2) / N)
    b = cfg.momentum
    prod = 1.0
    for a in range(k + 1, t):
        prod = prod * (lr_of(a) * b)
    return prod * lr_of(k) * (1 - b) / N
