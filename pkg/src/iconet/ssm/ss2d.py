"""Four-direction 2-D selective scan."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..autodiff import Tensor, ops
from ..nn import Module
from .scan import BLOCK, scan
from .selective import SelectiveScan

DIRECTIONS = ("L2R", "R2L", "T2B", "B2T")


@dataclass(frozen=True)
class DirectionalSequence:
    """Token order for one scan direction over an H x W grid.

    ``order[i]`` is the row-major pixel index visited at step i;
    ``inverse`` undoes it.
    """

    direction: str
    height: int
    width: int
    order: np.ndarray
    inverse: np.ndarray

    def expand(self, tokens: np.ndarray, axis: int = 0) -> np.ndarray:
        return np.take(tokens, self.order, axis=axis)

    def restore(self, seq: np.ndarray, axis: int = 0) -> np.ndarray:
        return np.take(seq, self.inverse, axis=axis)


@lru_cache(maxsize=256)
def directional_sequence(direction: str, height: int, width: int) -> DirectionalSequence:
    grid = np.arange(height * width).reshape(height, width)
    if direction == "L2R":
        order = grid.ravel()
    elif direction == "R2L":
        order = grid.ravel()[::-1]
    elif direction == "T2B":
        order = grid.T.ravel()
    elif direction == "B2T":
        order = grid.T.ravel()[::-1]
    else:
        raise ValueError(f"unknown scan direction '{direction}'")
    order = np.ascontiguousarray(order)
    order.setflags(write=False)
    inverse = np.argsort(order)
    inverse.setflags(write=False)
    return DirectionalSequence(direction, height, width, order, inverse)


class SS2D(Module):
    """Scan a feature map along four directions and sum the results.

    Each direction has its own projections, ``A`` and skip. All four scans
    run as one grouped kernel call.
    """

    def __init__(self, d_inner: int, rng: np.random.Generator, d_state: int = 16, block: int = BLOCK):
        self.d_inner, self.d_state, self.block = d_inner, d_state, block
        self.scans = [SelectiveScan(d_inner, rng, d_state=d_state) for _ in DIRECTIONS]

    def forward_tokens(self, x: Tensor) -> Tensor:
        """(b, H, W, d) channels-last in, same shape out."""
        b, H, W, d = x.shape
        if d != self.d_inner:
            raise ValueError(f"ss2d expects {self.d_inner} channels, got {d}")
        seq = ops.reshape(x, (b, H * W, d))
        dirs = [directional_sequence(name, H, W) for name in DIRECTIONS]
        xs, deltas, Bs, Cs = [], [], [], []
        for layer, ds in zip(self.scans, dirs):
            xg = ops.take(seq, ds.order, axis=1)
            delta, B, C = layer.project(xg)
            xs.append(xg)
            deltas.append(delta)
            Bs.append(B)
            Cs.append(C)

        def stack(ts):
            return ops.concat([ops.reshape(t, (1,) + t.shape) for t in ts], axis=0)

        A = stack([layer.A() for layer in self.scans])
        D = stack([layer.D for layer in self.scans])
        y = scan(stack(xs), stack(deltas), A, stack(Bs), stack(Cs), D, self.block)
        out = None
        for g, ds in enumerate(dirs):
            yg = ops.reshape(ops.slice_axis(y, g, g + 1, axis=0), (b, H * W, d))
            yg = ops.take(yg, ds.inverse, axis=1)
            out = yg if out is None else ops.add(out, yg)
        return ops.reshape(out, (b, H, W, d))

    def forward(self, x: Tensor) -> Tensor:
        """(b, d, H, W) feature map in, same shape out."""
        if x.ndim != 4:
            raise ValueError(f"ss2d expects a (b, c, h, w) map, got {x.shape}")
        y = self.forward_tokens(ops.permute(x, (0, 2, 3, 1)))
        return ops.permute(y, (0, 3, 1, 2))

    def flops(self, h: int, w: int) -> int:
        return sum(layer.flops(h * w) for layer in self.scans) + 3 * h * w * self.d_inner


def ss2d(x: Tensor, layer: SS2D) -> Tensor:
    return layer(x)
