"""Plain SGD and the polynomial learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..errors import StateError
from .tensor import Tensor


@dataclass
class OptimizerState:
    base_lr: float
    power: float = 0.9
    total_iters: int = 1
    current_iter: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if not 0 <= self.current_iter <= self.total_iters:
            raise ValueError("current_iter must lie in [0, total_iters]")

    def step(self) -> None:
        if self.current_iter >= self.total_iters:
            raise StateError("schedule exhausted")
        self.current_iter += 1


def poly_lr(state: OptimizerState) -> float:
    """base_lr * (1 - iter/total) ** power."""
    return state.base_lr * (1.0 - state.current_iter / state.total_iters) ** state.power


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad`` followed by zeroing the gradients."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError("parameter has no gradient; run backward first")
    for p in params:
        if lr != 0:
            p.data -= np.asarray(lr, dtype=p.dtype) * p.grad
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
