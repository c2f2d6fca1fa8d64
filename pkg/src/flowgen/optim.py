"""Adam optimizer and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor
from .util import ContractError, NonFiniteError


def global_grad_norm(params: list[Tensor]) -> float:
    """L2 norm over the concatenation of every parameter gradient."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_global_norm(params: list[Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  No-op when already within bounds.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NonFiniteError(f"gradient norm is {norm}")
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    The very first step with moments at zero reduces to
    ``p -= lr * g / (|g| + eps)`` up to the eps placement, which makes it easy
    to sanity-check against a hand computation.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if not params:
            raise ContractError("Adam: empty parameter list")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError(f"Adam: betas must lie in [0, 1), got {beta1}, {beta2}")
        if lr <= 0.0:
            raise ContractError(f"Adam: lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(
                    f"Adam.step: missing gradient for parameter {i} "
                    f"with shape {tuple(p.data.shape)}")
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError("Adam.step: non-finite gradient")
            dt = p.data.dtype.type
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / dt(bc1)
            v_hat = self.v[i] / dt(bc2)
            if self.weight_decay:
                p.data -= dt(self.lr * self.weight_decay) * p.data
            p.data -= dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of the moment estimates, for checkpoints."""
        out: dict[str, np.ndarray] = {}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.params)):
            m = arrays[f"m.{i}"]
            v = arrays[f"v.{i}"]
            if m.shape != self.params[i].data.shape or v.shape != self.params[i].data.shape:
                raise ContractError(f"optimizer state {i} has mismatched shape")
            self.m[i] = m.astype(self.params[i].data.dtype, copy=True)
            self.v[i] = v.astype(self.params[i].data.dtype, copy=True)
        self.step_count = int(step_count)
