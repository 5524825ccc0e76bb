"""Cross-branch fusion by hard patch attention and confidence gates.

For a query map and a key/value map, every query patch picks the key patch
with the highest cosine similarity, and the matching value patch is copied
to its position. The two directions (SR queries Rec, Rec queries SR) are
then weighted by sigmoid confidence maps and summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .nn import Conv2d, Module

DENSE_LIMIT = 4096
ROW_TILE = 1024


class NonFiniteInput(FloatingPointError, ValueError):
    """Relevance inputs contain NaN or Inf."""


def _normalize_rows(P: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    # blank patches normalize to the zero vector
    return np.divide(P, norms, out=np.zeros_like(P), where=norms > 0)


def _check_geometry(Q: np.ndarray, K: np.ndarray) -> None:
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValueError(f"patch geometry mismatch: queries {Q.shape}, keys {K.shape}")


def sab_relevance(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Cosine relevance ``R[i, j]`` between query patch i and key patch j.

    ``Q`` is (L_q, p) and ``K`` is (L_k, p), one flattened patch per row.
    """
    Q, K = np.asarray(Q), np.asarray(K)
    _check_geometry(Q, K)
    R = _normalize_rows(Q) @ _normalize_rows(K).T
    return np.clip(R, -1.0, 1.0, out=R)


def sab_index(R: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column."""
    R = np.asarray(R)
    if not np.all(np.isfinite(R)):
        raise NonFiniteInput("relevance matrix contains non-finite values")
    return np.argmax(R, axis=1)


def relevance_argmax(Q: np.ndarray, K: np.ndarray, dense_limit: int = DENSE_LIMIT, tile: int = ROW_TILE) -> np.ndarray:
    """``sab_index(sab_relevance(Q, K))`` without holding all of R for large L."""
    Q, K = np.asarray(Q), np.asarray(K)
    _check_geometry(Q, K)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(K))):
        raise NonFiniteInput("patch matrices contain non-finite values")
    if Q.shape[0] * K.shape[0] <= dense_limit * dense_limit:
        # finite inputs give a finite R, so the scan in sab_index is skipped
        return np.argmax(sab_relevance(Q, K), axis=1)
    Qn, Kn = _normalize_rows(Q), _normalize_rows(K).T
    out = np.empty(Q.shape[0], dtype=np.intp)
    for s in range(0, Q.shape[0], tile):
        R = Qn[s:s + tile] @ Kn
        out[s:s + tile] = np.argmax(np.clip(R, -1.0, 1.0, out=R), axis=1)
    return out


def sab_transfer(V: Tensor, sai: np.ndarray, output_size, channels: int, k: int = 3, padding: Optional[int] = None) -> Tensor:
    """Move value patches to the positions that selected them and fold back.

    ``V`` holds unfolded values (b, c*k*k, L); ``sai`` is (b, L). Overlaps
    are averaged, so an identity index returns the original map exactly.
    """
    padding = k // 2 if padding is None else padding
    sai = np.asarray(sai)
    if sai.ndim == 1:
        sai = sai[None]
    moved = ops.gather_columns(V, sai)
    return ops.fold(moved, output_size, channels, k, padding, normalize=True)


@dataclass
class FusionBundle:
    """Intermediate quantities of one fusion call, for inspection."""

    sai_sr: np.ndarray
    sai_rec: np.ndarray
    f_sab_sr: Tensor
    f_sab_rec: Tensor
    sac_sr: Tensor
    sac_rec: Tensor


class SRRecFusion(Module):
    """Fuse super-resolution and reconstruction features of equal shape.

    Queries, keys and values come from separate 1x1 convolutions. The
    argmax index carries no gradient, so query/key projections only shape
    which patches get picked; gradients reach values and the gate.
    """

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 3):
        self.channels, self.k = channels, k

        def proj():
            return Conv2d(channels, channels, 1, rng)

        self.q_sr, self.k_rec, self.v_rec = proj(), proj(), proj()
        self.q_rec, self.k_sr, self.v_sr = proj(), proj(), proj()
        self.sac = Conv2d(2 * channels, 2 * channels, 3, rng)

    def _attend(self, query_map: Tensor, key_map: Tensor, q: Conv2d, kp: Conv2d, vp: Conv2d):
        b, c, H, W = query_map.shape
        pad = self.k // 2
        with no_grad():
            Q = ops.unfold(q(query_map), self.k, pad).data
            K = ops.unfold(kp(key_map), self.k, pad).data
        sai = np.stack([relevance_argmax(Q[i].T, K[i].T) for i in range(b)])
        V = ops.unfold(vp(key_map), self.k, pad)
        return sab_transfer(V, sai, (H, W), c, self.k, pad), sai

    def forward(self, f_sr: Tensor, f_rec: Tensor, return_bundle: bool = False):
        if f_sr.shape != f_rec.shape:
            raise ValueError(f"fusion inputs differ in shape: {f_sr.shape} vs {f_rec.shape}")
        if f_sr.shape[1] != self.channels:
            raise ValueError(f"fusion expects {self.channels} channels, got {f_sr.shape[1]}")
        c = self.channels
        f_sab_sr, sai_sr = self._attend(f_sr, f_rec, self.q_sr, self.k_rec, self.v_rec)
        f_sab_rec, sai_rec = self._attend(f_rec, f_sr, self.q_rec, self.k_sr, self.v_sr)
        gates = ops.sigmoid(self.sac(ops.concat([f_sab_sr, f_sab_rec], axis=1)))
        sac_sr, sac_rec = ops.split(gates, [c, c], axis=1)
        out = ops.add(ops.mul(f_sab_sr, sac_sr), ops.mul(f_sab_rec, sac_rec))
        if return_bundle:
            return out, FusionBundle(sai_sr, sai_rec, f_sab_sr, f_sab_rec, sac_sr, sac_rec)
        return out

    def flops(self, h: int, w: int) -> int:
        L = h * w
        p = self.channels * self.k * self.k
        proj = 6 * self.q_sr.flops(h, w)
        relevance = 2 * (2 * L * L * p + 3 * L * p)
        fold = 2 * (p * L + self.channels * L)
        gate = self.sac.flops(h, w) + 4 * 2 * self.channels * L
        return proj + relevance + fold + gate + 3 * self.channels * L


def sr_rec_fuse(f_sr: Tensor, f_rec: Tensor, module: SRRecFusion) -> Tensor:
    return module(f_sr, f_rec)
