"""Parameter containers in the familiar module style."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import get_default_dtype


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class; parameters and sub-modules are discovered from attributes.

    Attribute order is insertion order, so parameter naming is stable.
    Lists of modules are walked too.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter '{name}'")
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"parameter '{name}': shape {tuple(arr.shape)} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound)
        self.bias = uniform(rng, (d_out,), bound) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def flops(self, tokens: int) -> int:
        return tokens * (2 * self.d_in * self.d_out + (self.d_out if self.bias is not None else 0))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, padding: int | None = None,
                 groups: int = 1, bias: bool = True):
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        bound = 1.0 / math.sqrt(c_in // groups * k * k)
        self.weight = uniform(rng, (c_out, c_in // groups, k, k), bound)
        self.bias = uniform(rng, (c_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding, groups=self.groups)

    def flops(self, h: int, w: int) -> int:
        c_out, cpg, kh, kw = self.weight.shape
        macs = c_out * cpg * kh * kw * h * w
        return 2 * macs + (c_out * h * w if self.bias is not None else 0)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)

    def flops(self, tokens: int) -> int:
        return tokens * 8 * self.weight.shape[0]
