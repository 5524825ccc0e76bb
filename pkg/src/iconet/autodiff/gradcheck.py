"""Central finite-difference checks against ``backward``."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both vanish."""
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)))
    if scale == 0:
        return 0.0
    return float(diff / scale)


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, indices: Optional[Sequence] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. selected flat entries of ``t``."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            out[k] = (fp - fm) / (2 * h)
    return out


def compare_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, max_entries: int = 0,
                      seed: int = 0) -> list:
    """Analytic and numeric gradients side by side: ``[(key, analytic, numeric)]``.

    With ``max_entries > 0`` only that many randomly chosen entries of each
    input are perturbed.
    """
    for t in inputs:
        t.grad = None
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
    loss = f()
    backward(loss, leaves=inputs)
    rng = np.random.default_rng(seed)
    out = []
    for k, t in enumerate(inputs):
        n = t.data.size
        if max_entries and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        out.append((t.name or k, t.grad.reshape(-1)[idx].copy(), numerical_grad(f, t, h, idx)))
    return out


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, max_entries: int = 0,
                    seed: int = 0) -> dict:
    """Per-input relative error ``{index_or_name: error}``."""
    return {key: relative_error(a, n) for key, a, n in compare_gradients(f, inputs, h, max_entries, seed)}


def check_gradients_joint(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, max_entries: int = 0,
                          seed: int = 0) -> float:
    """Relative error of all sampled gradient entries taken as one vector.

    Suited to composed blocks, where some parameters have gradients too
    small for central differences to resolve on their own.
    """
    rows = compare_gradients(f, inputs, h, max_entries, seed)
    return relative_error(np.concatenate([a for _, a, _ in rows]), np.concatenate([n for _, _, n in rows]))
