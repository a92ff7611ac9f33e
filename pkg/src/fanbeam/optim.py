"""Adam on flat numpy parameter vectors, with serializable state."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction.

    Operates in place on a single float vector; callers keep views into it
    for structured parameters.
    """

    def __init__(self, size: int, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, dtype=np.float64) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        """Advance the moments with ``grad`` and return the (negative) update."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        theta -= self.direction(grad).astype(theta.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                "t": self.t, "m": self.m.copy(), "v": self.v.copy()}

    def load_state_dict(self, state: dict) -> None:
        if np.shape(state["m"]) != self.m.shape:
            raise ValueError(f"optimizer state has size {np.shape(state['m'])}, expected {self.m.shape}")
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = (float(b) for b in state["betas"])
        self.eps = float(state["eps"])
        self.t = int(state["t"])
        self.m = np.array(state["m"], dtype=self.m.dtype)
        self.v = np.array(state["v"], dtype=self.v.dtype)
