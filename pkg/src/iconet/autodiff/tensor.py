"""Dense tensors recorded on a tape for reverse-mode differentiation.

Every op output remembers its inputs and a backward rule. ``backward``
rebuilds the tape from the loss (ordered by creation id, which is a valid
topological order) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


class NumericError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


def _get(name, default):
    return getattr(_local, name, default)


def get_default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float64))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _local.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


def is_checked() -> bool:
    return _get("checked", False)


def set_checked(flag: bool) -> None:
    _local.checked = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True):
    old = is_checked()
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(old)


# Names of backward rules whose sign is deliberately flipped. Only the
# verification harness touches this, to prove the gradient checks bite.
FAULTS: set[str] = set()


def fault_sign(rule: str) -> float:
    return -1.0 if rule in FAULTS else 1.0


class Tensor:
    """N-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensor data must be real floating point, got {arr.dtype}")
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self.name = name
        self.op = "leaf"
        self._inputs: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = next(_ids)
        t.name = None
        t.op = "leaf"
        t._inputs = ()
        t._backward = None
        return t

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar, all strict about shapes --------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, recording it on the tape when any input needs grad.

    ``backward(g)`` returns one gradient (or None) per input.
    """
    if is_checked() and not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced non-finite values")
    out = Tensor._wrap(data)
    out.op = op
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


@dataclass
class Tape:
    """Recorded op nodes reachable from a loss, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen or not t.requires_grad:
                continue
            seen[t.node_id] = t
            stack.extend(t._inputs)
        return cls([seen[k] for k in sorted(seen)])

    def is_topological(self) -> bool:
        pos = {t.node_id: i for i, t in enumerate(self.nodes)}
        return all(pos[i.node_id] < pos[t.node_id] for t in self.nodes for i in t._inputs if i.node_id in pos)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate. Leaves listed in ``leaves`` that the loss
    does not reach receive an explicit zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node._backward(g)
        for inp, ig in zip(node._inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise RuntimeError(f"backward of '{node.op}' returned grad {ig.shape} for input {inp.shape}")
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = ig if prev is None else prev + ig
        if not retain_graph:
            node._inputs = ()
            node._backward = None
            node.requires_grad = False
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape
