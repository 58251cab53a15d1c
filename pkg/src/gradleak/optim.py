"""Adam and SGD-with-momentum over named parameter tensors.

Both optimizers bind to a dict of named Tensors, keep per-parameter moment
state matching each parameter's shape, and zero the grads after applying a
step. The step counter increases by exactly one per step() call.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """step() was called while some parameter has no populated gradient."""


class _Optimizer:
    kind = "base"

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.step_count = 0

    def _grads(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter '{name}' has no gradient; run backward() first")
            grads[name] = p.grad
        return grads

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = self._grads()
        self.step_count += 1
        self._apply(grads)
        self.zero_grad()

    def _apply(self, grads):
        raise NotImplementedError


class Adam(_Optimizer):
    """Standard Adam with bias correction; epsilon added outside the sqrt."""

    kind = "adam"

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _apply(self, grads):
        t = self.step_count
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class SGDMomentum(_Optimizer):
    """Classic momentum: buf = mu * buf + g; p -= lr * buf."""

    kind = "sgd-momentum"

    def __init__(self, params, lr=0.01, momentum=0.9):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _apply(self, grads):
        for name, p in self.params.items():
            self.buf[name] = self.momentum * self.buf[name] + grads[name]
            p.data -= (self.lr * self.buf[name]).astype(p.data.dtype)


def make_optimizer(params: dict[str, Tensor], settings: dict) -> _Optimizer:
    """Build an optimizer from a config dict with a 'kind' key."""
    kind = settings.get("kind", "adam")
    if kind == "adam":
        return Adam(params, lr=settings.get("lr", 0.001),
                    beta1=settings.get("beta1", 0.9), beta2=settings.get("beta2", 0.999),
                    eps=settings.get("eps", 1e-8))
    if kind == "sgd-momentum":
        return SGDMomentum(params, lr=settings.get("lr", 0.01), momentum=settings.get("momentum", 0.9))
    raise ValueError(f"unknown optimizer kind '{kind}'")
