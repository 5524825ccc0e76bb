"""Spatial (vision Mamba) and channel blocks and their residual composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .nn import Conv2d, LayerNorm, Linear, Module
from .ssm import SS2D


@dataclass(frozen=True)
class VmbConfig:
    d_model: int
    expand: int = 2
    d_state: int = 16
    kernel: int = 3

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass(frozen=True)
class CrbConfig:
    channels: int
    reduction: int = 16

    @property
    def hidden(self) -> int:
        # keep at least 4 hidden units for narrow test models
        return min(self.channels, max(self.channels // self.reduction, 4))


class VMB(Module):
    """Two-path block: ``x + out(lin1(u) * norm(ss2d(silu(dwconv(lin2(u))))))``, ``u = norm(x)``."""

    def __init__(self, config: VmbConfig, rng: np.random.Generator):
        self.config = config
        c, d = config.d_model, config.d_inner
        self.norm_in = LayerNorm(c)
        self.gate_proj = Linear(c, d, rng)
        self.in_proj = Linear(c, d, rng)
        self.dwconv = Conv2d(d, d, config.kernel, rng, groups=d)
        self.ss2d = SS2D(d, rng, d_state=config.d_state)
        self.norm_out = LayerNorm(d)
        self.out_proj = Linear(d, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.d_model:
            raise ValueError(f"VMB expects (b, {self.config.d_model}, h, w), got {x.shape}")
        xc = ops.permute(x, (0, 2, 3, 1))
        u = self.norm_in(xc)
        gate = self.gate_proj(u)
        z = ops.permute(self.in_proj(u), (0, 3, 1, 2))
        z = ops.silu(self.dwconv(z))
        z = self.ss2d.forward_tokens(ops.permute(z, (0, 2, 3, 1)))
        z = self.norm_out(z)
        y = self.out_proj(ops.mul(gate, z))
        return ops.add(x, ops.permute(y, (0, 3, 1, 2)))

    def flops(self, h: int, w: int) -> int:
        t = h * w
        d = self.config.d_inner
        return (self.norm_in.flops(t) + self.gate_proj.flops(t) + self.in_proj.flops(t)
                + self.dwconv.flops(h, w) + 4 * t * d + self.ss2d.flops(h, w) + self.norm_out.flops(t)
                + t * d + self.out_proj.flops(t) + t * self.config.d_model)


class CRB(Module):
    """Squeeze-excitation style gate: pool, 1x1 conv, ReLU, 1x1 conv, sigmoid, scale.

    The 1x1 convolutions act on the pooled vector, so they are stored as
    linear layers.
    """

    def __init__(self, config: CrbConfig, rng: np.random.Generator):
        self.config = config
        self.squeeze = Linear(config.channels, config.hidden, rng)
        self.excite = Linear(config.hidden, config.channels, rng)

    def weights(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(ops.global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"CRB expects (b, {self.config.channels}, h, w), got {x.shape}")
        return ops.channel_scale(x, self.weights(x))

    def flops(self, h: int, w: int) -> int:
        c = self.config.channels
        return c * h * w + self.squeeze.flops(1) + self.excite.flops(1) + 4 * c + c * h * w


class RSCFL(Module):
    """``x + CRB(VMB(x))``."""

    def __init__(self, channels: int, rng: np.random.Generator, expand: int = 2, d_state: int = 16,
                 reduction: int = 16):
        self.vmb = VMB(VmbConfig(channels, expand=expand, d_state=d_state), rng)
        self.crb = CRB(CrbConfig(channels, reduction), rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.crb(self.vmb(x)))

    def flops(self, h: int, w: int) -> int:
        c = self.crb.config.channels
        return self.vmb.flops(h, w) + self.crb.flops(h, w) + c * h * w


def vmb_forward(x: Tensor, block: VMB) -> Tensor:
    return block(x)


def crb_forward(x: Tensor, block: CRB) -> Tensor:
    return block(x)


def rscfl_forward(x: Tensor, block: RSCFL) -> Tensor:
    return block(x)
