"""Adam optimizer and the polynomial learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, TensorError


def lr_schedule(alpha0: float, epoch: int, total_epochs: int) -> float:
    """alpha0 * (1 - e/N)^0.9, evaluated once per epoch."""
    if total_epochs < 1:
        raise TensorError(f"total_epochs must be >= 1, got {total_epochs}")
    if epoch < 0 or epoch > total_epochs:
        raise TensorError(f"epoch {epoch} outside [0, {total_epochs}]")
    return alpha0 * (1.0 - epoch / total_epochs) ** 0.9


class Adam:
    """Standard bias-corrected Adam over a named parameter list."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params}
        self.v = {name: np.zeros(p.shape) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise TensorError(f"parameter {name} has no gradient; run backward first")
            if not np.all(np.isfinite(g)):
                raise TensorError(f"non-finite gradient on parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.assign_(p.data - lr * update)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name, _ in self.params:
            if name not in state["m"] or name not in state["v"]:
                raise TensorError(f"optimizer state missing moments for {name}")
            if state["m"][name].shape != self.m[name].shape:
                raise TensorError(f"optimizer state shape mismatch for {name}")
            self.m[name] = state["m"][name].astype(np.float64).copy()
            self.v[name] = state["v"][name].astype(np.float64).copy()
