"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict[int, AdamState] = field(default_factory=dict, repr=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """Update every parameter that received a gradient.

        Parameters without a gradient this step (e.g. an edge operator that
        was not selected) are left untouched and keep their moments.
        """
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            st = self.state.get(i)
            if st is None:
                st = self.state[i] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            adam_step(p, p.grad, st, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(p: Tensor, g: np.ndarray, st: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    st.step += 1
    st.m = beta1 * st.m + (1 - beta1) * g
    st.v = beta2 * st.v + (1 - beta2) * g * g
    m_hat = st.m / (1 - beta1**st.step)
    v_hat = st.v / (1 - beta2**st.step)
    p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
