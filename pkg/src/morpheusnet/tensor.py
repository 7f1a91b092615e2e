"""Dense tensors with explicit gradient buffers, Adam, and a numeric gradient probe.

Everything in this package computes gradients by hand, layer by layer; there is
no computation graph. A ``Tensor`` is just an ndarray plus an optional gradient
buffer of the same shape that the training loops accumulate into.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class Tensor:
    """An n-d float array with an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(
                f"grad shape {self.grad.shape} does not match data shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def add_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())


@dataclass
class AdamState:
    """Adam optimizer state; ``m``/``v`` buffers are lazily shaped on first step."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray] | None,
    state: AdamState,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` may be None, in which case each parameter's own ``.grad`` buffer
    is consumed. Moment buffers must stay shape-congruent with the parameters
    across calls.
    """
    if grads is None:
        grads = [p.grad for p in params]
        if any(g is None for g in grads):
            raise ValueError("adam_step: a parameter has no gradient buffer")
    if len(grads) != len(params):
        raise ValueError("adam_step: params and grads differ in length")

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: optimizer state tracks a different parameter count")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(
                f"adam_step: shape mismatch (param {p.data.shape}, grad {g.shape})"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (state.lr / bias1) * m / (np.sqrt(v / bias2) + state.epsilon)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    epsilon: float = 1e-4,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    Evaluates in float64 regardless of the input dtype; ``f`` must be
    deterministic.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x64 = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x64)
    flat = x64.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f(x64))
        flat[i] = orig - epsilon
        f_minus = float(f(x64))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad
