"""Small parameterised building blocks bound to a ModelState."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .state import ModelState
from .tensor import Tensor


def _normal(rng: np.random.Generator, shape, std: float):
    return lambda: rng.normal(0.0, std, size=shape)


class Linear:
    """y = x @ W + b with W of shape (n_in, n_out)."""

    def __init__(self, state: ModelState, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = np.sqrt(1.0 / n_in) if std is None else std
        self.weight = state.param(f"{name}.weight", _normal(rng, (n_in, n_out), std))
        self.bias = state.param(f"{name}.bias", lambda: np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    def __init__(self, state: ModelState, name: str, dim: int):
        self.gamma = state.param(f"{name}.gamma", lambda: np.ones(dim))
        self.beta = state.param(f"{name}.beta", lambda: np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta)


class BatchNorm:
    """Batch norm over channel axis 1 with tracked running statistics."""

    def __init__(self, state: ModelState, name: str, channels: int, momentum: float = 0.1):
        self.gamma = state.param(f"{name}.gamma", lambda: np.ones(channels))
        self.beta = state.param(f"{name}.beta", lambda: np.zeros(channels))
        self.running_mean = state.param(f"{name}.running_mean", lambda: np.zeros(channels), trainable=False)
        self.running_var = state.param(f"{name}.running_var", lambda: np.ones(channels), trainable=False)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=training, momentum=self.momentum)


class Conv3x3:
    """Bias-free 3x3 convolution; always followed by batch norm here."""

    def __init__(self, state: ModelState, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (9 * c_in))
        self.weight = state.param(f"{name}.weight", _normal(rng, (c_out, c_in, 3, 3), std))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight)
