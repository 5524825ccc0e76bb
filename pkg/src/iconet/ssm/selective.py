"""Input-dependent (selective) state-space layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, no_grad, ops
from ..nn import Linear, Module, parameter, uniform
from .scan import BLOCK, scan, scan_reference


@dataclass(frozen=True)
class SsmParams:
    """Per-position discretization inputs derived from a token sequence.

    ``delta`` (b, L, d) after softplus, ``B``/``C`` (b, L, n), ``A`` (d, n)
    negative, ``D`` (d,).
    """

    delta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveScan(Module):
    """Projects tokens to (delta, B, C) and runs the discretized recurrence.

    ``A = -exp(A_log)`` keeps every eigenvalue negative; ``delta`` goes
    through softplus so it stays positive.
    """

    def __init__(self, d_inner: int, rng: np.random.Generator, d_state: int = 16, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_inner, self.d_state = d_inner, d_state
        self.dt_rank = dt_rank or max(1, math.ceil(d_inner / 16))
        self.x_proj = Linear(d_inner, self.dt_rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(self.dt_rank, d_inner, rng)
        self.dt_proj.weight = uniform(rng, (self.dt_rank, d_inner), self.dt_rank ** -0.5)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        self.dt_proj.bias = parameter(inverse_softplus(dt))
        self.A_log = parameter(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1)))
        self.D = parameter(np.ones(d_inner))

    def project(self, x: Tensor):
        """Return (delta, B, C) tensors for tokens ``x`` of shape (b, L, d)."""
        proj = self.x_proj(x)
        low, B, C = ops.split(proj, [self.dt_rank, self.d_state, self.d_state], axis=-1)
        delta = ops.softplus(self.dt_proj(low))
        return delta, B, C

    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.A_log))

    def params(self, x: Tensor) -> SsmParams:
        with no_grad():
            delta, B, C = self.project(x)
            return SsmParams(delta.data, self.A().data, B.data, C.data, self.D.data)

    def forward(self, x: Tensor, path: str = "blocked", block: int = BLOCK) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d_inner:
            raise ValueError(f"selective scan expects (b, L, {self.d_inner}) tokens, got {x.shape}")
        if path == "sequential":
            p = self.params(x)
            y = scan_reference(x.data[None], p.delta[None], p.A[None], p.B[None], p.C[None], p.D[None])
            return Tensor(y[0], dtype=x.dtype)
        if path != "blocked":
            raise ValueError(f"unknown scan path '{path}'")
        delta, B, C = self.project(x)
        y = scan(ops.reshape(x, (1,) + x.shape), ops.reshape(delta, (1,) + delta.shape),
                 ops.reshape(self.A(), (1, self.d_inner, self.d_state)),
                 ops.reshape(B, (1,) + B.shape), ops.reshape(C, (1,) + C.shape),
                 ops.reshape(self.D, (1, self.d_inner)), block)
        return ops.reshape(y, x.shape)

    def flops(self, tokens: int) -> int:
        d, n = self.d_inner, self.d_state
        per_token = (self.x_proj.flops(1) + self.dt_proj.flops(1) + 2 * d  # projections, softplus
                     + 7 * d * n      # exp, discretization, state update
                     + 2 * d * n      # readout through C
                     + 2 * d)         # skip
        return tokens * per_token


def selective_scan(x: Tensor, layer: SelectiveScan, path: str = "blocked") -> Tensor:
    return layer(x, path=path)
