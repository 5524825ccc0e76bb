"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, is_checked


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_like(self, params: Sequence[np.ndarray]) -> None:
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> list:
    """Return updated parameter arrays; moments in ``state`` advance in place."""
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    if not state.m:
        state.init_like(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state are not aligned")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {g.shape} does not match param {p.shape}")
        if is_checked() and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {i}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        if state.lr == 0:
            out.append(p)
            continue
        step = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        out.append(p - step)
    return out


class Adam:
    """Thin stateful wrapper binding :func:`adam_step` to tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.init_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        for p, d in zip(self.params, new):
            p.data = d
