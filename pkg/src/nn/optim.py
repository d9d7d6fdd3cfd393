from typing import Dict, List, Optional, Sequence

import numpy as np

from src.nn.tensor import Tensor
from src.utils.errors import ShapeError


class Adam:
    """Adam with bias correction; moment buffers mirror the parameter list order."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Optional[Sequence[np.ndarray]] = None):
        """Apply one update from `grads`, or from each parameter's `.grad` when omitted."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"adam: {len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient {g.shape} does not match parameter {p.data.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state(self) -> Dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step": self.step_count,
        }

    def load_moments(self, m: Sequence[np.ndarray], v: Sequence[np.ndarray], step: int):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ShapeError("adam: moment buffers do not match the parameter list")
        self.m = [np.asarray(x, dtype=p.data.dtype).reshape(p.data.shape) for x, p in zip(m, self.params)]
        self.v = [np.asarray(x, dtype=p.data.dtype).reshape(p.data.shape) for x, p in zip(v, self.params)]
        self.step_count = int(step)
