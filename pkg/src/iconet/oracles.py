"""Slow, independent reference computations used to check the fast paths."""

from __future__ import annotations

import numpy as np

from .ssm.scan import ssm_scan_sequential, zoh_discretize


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """O(N^2) 2D DFT by explicit summation over every input sample."""
    x = np.asarray(x, dtype=np.complex128)
    H, W = x.shape
    out = np.zeros((H, W), dtype=np.complex128)
    r = np.arange(H)[:, None]
    c = np.arange(W)[None, :]
    for u in range(H):
        for v in range(W):
            out[u, v] = np.sum(x * np.exp(-2j * np.pi * (u * r / H + v * c / W)))
    return out


def euler_zoh(A: float, B: float, delta: float, substeps: int = 1000) -> tuple:
    """Integrate ``h' = A h + B u`` over [0, delta] with forward Euler.

    Starting from h=1, u=0 gives Abar; from h=0, u=1 (held constant, the
    zero-order hold) gives Bbar.
    """
    dt = delta / substeps
    h_free, h_forced = 1.0, 0.0
    for _ in range(substeps):
        h_free = h_free + dt * A * h_free
        h_forced = h_forced + dt * (A * h_forced + B)
    return h_free, h_forced


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0)


def selective_scan_bruteforce(layer, tokens: np.ndarray) -> np.ndarray:
    """Recompute one selective-scan layer from its raw weights, token by token.

    ``tokens`` is (L, d) for a single sequence.
    """
    R, N = layer.dt_rank, layer.d_state
    Wx = layer.x_proj.weight.data
    Wdt, bdt = layer.dt_proj.weight.data, layer.dt_proj.bias.data
    A = -np.exp(layer.A_log.data)
    D = layer.D.data
    L = tokens.shape[0]
    Abar = np.empty((L,) + A.shape)
    Bbar = np.empty((L,) + A.shape)
    C = np.empty((L, N))
    for t in range(L):
        proj = tokens[t] @ Wx
        delta = _softplus(proj[:R] @ Wdt + bdt)
        Abar[t], Bbar[t] = zoh_discretize(A, proj[R:R + N][None, :], delta[:, None])
        C[t] = proj[R + N:]
    return ssm_scan_sequential(Abar, Bbar, C, tokens, D)


def direction_orders(height: int, width: int) -> dict:
    """Visiting order of (row, col) pixels for each direction, built by explicit loops."""
    row_major = [(r, c) for r in range(height) for c in range(width)]
    col_major = [(r, c) for c in range(width) for r in range(height)]
    return {"L2R": row_major, "R2L": row_major[::-1], "T2B": col_major, "B2T": col_major[::-1]}


def ss2d_bruteforce(layer, fmap: np.ndarray) -> np.ndarray:
    """Four sequential scans over explicit pixel orders, scattered back and summed.

    ``fmap`` is (b, d, H, W).
    """
    b, d, H, W = fmap.shape
    out = np.zeros_like(fmap, dtype=np.float64)
    orders = direction_orders(H, W)
    for scan_layer, name in zip(layer.scans, ("L2R", "R2L", "T2B", "B2T")):
        order = orders[name]
        for i in range(b):
            seq = np.stack([fmap[i, :, r, c] for r, c in order])
            y = selective_scan_bruteforce(scan_layer, seq)
            for t, (r, c) in enumerate(order):
                out[i, :, r, c] += y[t]
    return out


def argmax_bruteforce(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Best key per query by a double loop over normalized inner products."""
    out = np.zeros(Q.shape[0], dtype=np.intp)
    for i in range(Q.shape[0]):
        qn = np.linalg.norm(Q[i])
        best, best_j = -np.inf, 0
        for j in range(K.shape[0]):
            kn = np.linalg.norm(K[j])
            r = 0.0 if qn == 0 or kn == 0 else float(Q[i] @ K[j]) / (qn * kn)
            if r > best:
                best, best_j = r, j
        out[i] = best_j
    return out


def gather_pixels(fmap: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Pixel-level transfer: output pixel i takes the value of pixel ``index[i]`` (row-major)."""
    c, H, W = fmap.shape
    flat = fmap.reshape(c, H * W)
    out = np.empty_like(flat)
    for i, j in enumerate(index):
        out[:, i] = flat[:, j]
    return out.reshape(c, H, W)
