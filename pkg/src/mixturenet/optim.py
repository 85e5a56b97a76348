"""First-order optimization utilities for the autodiff tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "adam_step", "project_nonneg", "Adam"]


@dataclass
class AdamState:
    """Per-parameter Adam moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(
    param: Tensor,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction.

    A parameter whose gradient is exactly zero is left unchanged (the moments
    stay at zero and the correction divides out), but a parameter with no
    gradient buffer at all is a caller bug and rejected.
    """
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient; run backward first")
    state.t += 1
    g = param.grad
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def project_nonneg(param: Tensor) -> None:
    """Clamp a parameter onto the non-negative orthant, in place."""
    np.maximum(param.data, 0.0, out=param.data)


@dataclass
class Adam:
    """Adam over a fixed parameter list, one state per parameter."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [AdamState.for_param(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        # parameters outside the active graph (grad still None) are skipped,
        # so a partial loss does not have to cover every registered tensor
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue
            adam_step(p, s, self.lr, self.beta1, self.beta2, self.eps)
