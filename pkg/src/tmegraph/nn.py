"""Parameter initialization, the Adam optimizer, and gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, parameter


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite during an optimization loop."""

    def __init__(self, step, breakdown=None):
        super().__init__(f"non-finite loss at step {step}"
                         + (f": {breakdown}" if breakdown is not None else ""))
        self.step = step
        self.breakdown = breakdown


def kaiming(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """He-normal init for layers followed by ReLU."""
    std = np.sqrt(2.0 / max(1, fan_in))
    return parameter(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


class Adam:
    """Adaptive-moment gradient descent over a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[k] = self.b1 * self._m[k] + (1.0 - self.b1) * p.grad
            v = self._v[k] = self.b2 * self._v[k] + (1.0 - self.b2) * (p.grad * p.grad)
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on every call.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for k, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1.0)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
