"""First-order stochastic optimizer with adaptive moments.

Setting both moment coefficients to zero disables the running averages and
the second-moment normalization, recovering plain gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from .nets import ParamVector


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "MomentState":
        n = params.values.size
        return cls(m=np.zeros(n), v=np.zeros(n), beta1=beta1, beta2=beta2, eps=eps)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float, state: MomentState) -> ParamVector:
    """Adaptive-moment descent step; mutates params and state in place."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to optimizer")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.t) if b1 > 0 else state.m
    if b2 > 0:
        v_hat = state.v / (1.0 - b2**state.t)
        params.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        params.values -= lr * m_hat
    return params
