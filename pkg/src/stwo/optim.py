"""Named parameters and the Adam update used by all training code."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DimensionError


class Parameter:
    """A trainable tensor plus its Adam moment accumulators."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise DimensionError(
                f"parameter {self.name}: shape {value.shape} != "
                f"{self.tensor.data.shape}")
        self.tensor.data = value
        if self.adam_m.shape != value.shape:
            self.adam_m = np.zeros_like(value)
            self.adam_v = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def check_unique_names(params: Iterable[Parameter]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.0,
              beta2: float = 0.99, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        if p.tensor.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.tensor.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None
