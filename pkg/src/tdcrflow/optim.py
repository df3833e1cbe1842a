"""Adam optimizer and exponential-moving-average shadow weights."""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, Parameter
from .errors import ContractViolation


class Adam:
    """Adam with bias correction.

    Per step, for each parameter p with gradient g:
        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g^2
        p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ContractViolation("Adam needs at least one parameter")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(params, decay: float) -> None:
    """shadow <- decay*shadow + (1-decay)*value for every parameter.

    decay=0 copies the live weights, decay=1 leaves the shadow untouched.
    """
    if not 0.0 <= decay <= 1.0:
        raise ContractViolation(f"EMA decay must be in [0, 1], got {decay}")
    for p in params:
        p.ema *= decay
        p.ema += (1.0 - decay) * p.value


def ema_copy_into_value(params) -> None:
    """Overwrite live weights with the EMA shadow (used when sampling)."""
    for p in params:
        p.value[...] = p.ema


def flatten_params(params) -> np.ndarray:
    """Concatenate all parameter values into one 1-D float64 vector."""
    return np.concatenate([p.value.ravel() for p in params]).astype(DTYPE)


def load_flat_params(params, vec: np.ndarray) -> None:
    """Inverse of flatten_params; sizes must match exactly."""
    vec = np.asarray(vec, dtype=DTYPE)
    total = sum(p.value.size for p in params)
    if vec.size != total:
        raise ContractViolation(f"flat vector has {vec.size} entries, parameters need {total}")
    off = 0
    for p in params:
        n = p.value.size
        p.value[...] = vec[off:off + n].reshape(p.value.shape)
        off += n
