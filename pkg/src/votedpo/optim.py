"""Plain gradient descent and Adam with decoupled weight decay on flat vectors.

Adam update for step n (1-based), gradient g, rate lr:

    m = b1*m + (1-b1)*g
    v = b2*v + (1-b2)*g*g
    m_hat = m / (1 - b1**n),  v_hat = v / (1 - b2**n)
    theta = theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prefcore import ValidationError

OPTIMIZERS = ("sgd", "adaptive_moments")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adaptive_moments"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState, cfg: OptimizerConfig,
                   lr: float) -> tuple[np.ndarray, OptimizerState]:
    if params.shape != grad.shape:
        raise ValidationError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if cfg.kind == "sgd":
        return params - lr * grad, OptimizerState(state.step + 1)

    n = state.step + 1
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** n)
    v_hat = v / (1.0 - cfg.beta2 ** n)
    update = m_hat / (np.sqrt(v_hat) + cfg.eps)
    if cfg.weight_decay:
        update = update + cfg.weight_decay * params
    return params - lr * update, OptimizerState(n, m, v)
