"""Adam optimizer and a finite-difference gradient oracle.

Standard bias-corrected Adam recurrence:

    m1 <- b1*m1 + (1-b1)*g          m1_hat = m1 / (1 - b1^t)
    m2 <- b2*m2 + (1-b2)*g^2        m2_hat = m2 / (1 - b2^t)
    value <- value - lr * m1_hat / (sqrt(m2_hat) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass
class AdamState:
    """Per-parameter moment buffers; shapes always mirror the parameter."""

    step: int
    m1: np.ndarray
    m2: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(param: Tensor, lr: float = 1e-3,
                    beta1: float = 0.9, beta2: float = 0.999,
                    eps: float = 1e-8) -> AdamState:
    if lr <= 0.0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    return AdamState(
        step=0,
        m1=np.zeros_like(param.value),
        m2=np.zeros_like(param.value),
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(param: Tensor, state: AdamState) -> None:
    """One in-place Adam update of ``param.value`` from ``param.grad``."""
    g = param.grad
    if g is None:
        raise ParameterError("parameter has no gradient; run backward() first")
    if g.shape != state.m1.shape or g.shape != param.value.shape:
        raise ShapeError("optimizer state shape does not match the parameter")
    state.step += 1
    state.m1 *= state.beta1
    state.m1 += (1.0 - state.beta1) * g
    state.m2 *= state.beta2
    state.m2 += (1.0 - state.beta2) * (g * g)
    m1_hat = state.m1 / (1.0 - state.beta1 ** state.step)
    m2_hat = state.m2 / (1.0 - state.beta2 ** state.step)
    param.value -= state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps)


class Adam:
    """Convenience wrapper driving :func:`adam_step` over a parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [init_adam_state(p, lr, beta1, beta2, eps) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float],
                         value: np.ndarray,
                         epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d loss / d value, entry by entry.

    ``loss_fn`` must be pure: it is called 2 * value.size times on perturbed
    copies and must not retain references to its argument.
    """
    if epsilon <= 0.0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = grad.reshape(-1)
    for i in range(value.size):
        bumped = value.copy().reshape(-1)
        bumped[i] += epsilon
        up = loss_fn(bumped.reshape(value.shape))
        bumped[i] -= 2.0 * epsilon
        down = loss_fn(bumped.reshape(value.shape))
        flat[i] = (up - down) / (2.0 * epsilon)
    return grad
