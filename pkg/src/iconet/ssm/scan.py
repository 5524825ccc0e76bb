"""Discretized state-space recurrences.

Two evaluation paths exist for the same recurrence::

    h_t = Abar_t * h_{t-1} + Bbar_t * x_t
    y_t = <C_t, h_t> + D * x_t

``ssm_scan_sequential`` is the literal per-step loop and serves as the
reference. ``scan`` is the production path: tokens are processed in blocks,
the exponentials of a block are evaluated in one vectorized call, the
recurrence runs in compiled loops, and only the state at each block boundary
is kept. The backward pass recomputes a block's states from its boundary.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, make_result
from ..autodiff.tensor import fault_sign

try:
    import numba

    _jit = numba.njit(cache=True, boundscheck=False, fastmath={"reassoc", "contract"})
except ImportError:  # pragma: no cover - slow but correct
    def _jit(f):
        return f

BLOCK = 64


def zoh_discretize(A, B, delta):
    """Zero-order-hold discretization for diagonal ``A``.

    ``Abar = exp(delta*A)`` and ``Bbar = (delta*A)^-1 (exp(delta*A) - 1) delta*B``,
    evaluated elementwise as ``expm1(delta*A) / A * B`` so that small steps
    keep full precision. Inputs broadcast against each other.
    """
    A = np.asarray(A)
    if A.dtype.kind != "f":
        A = A.astype(np.float64)
    delta = np.asarray(delta, dtype=A.dtype)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: delta must be strictly positive")
    z = delta * A
    Abar = np.exp(z)
    em = np.expm1(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(A == 0, delta, em / np.where(A == 0, 1, A))
    Bbar = coef * np.asarray(B, dtype=A.dtype)
    return Abar, Bbar


def ssm_scan_sequential(Abar, Bbar, C, x, D=None):
    """Reference recurrence over one sequence.

    Shapes: ``Abar``/``Bbar`` (L, d, n), ``C`` (L, n), ``x`` (L, d), ``D`` (d,).
    Returns ``y`` of shape (L, d).
    """
    Abar, Bbar, C, x = (np.asarray(a) for a in (Abar, Bbar, C, x))
    L = x.shape[0]
    if not (Abar.shape[0] == Bbar.shape[0] == C.shape[0] == L):
        raise ValueError(f"sequence length mismatch: x has {L}, parameters have "
                         f"{Abar.shape[0]}/{Bbar.shape[0]}/{C.shape[0]}")
    if Abar.shape != Bbar.shape or Abar.shape[1:] != (x.shape[1], C.shape[1]):
        raise ValueError(f"shape mismatch: Abar {Abar.shape}, Bbar {Bbar.shape}, C {C.shape}, x {x.shape}")
    h = np.zeros(Abar.shape[1:], dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(L):
        h = Abar[t] * h + Bbar[t] * x[t][:, None]
        y[t] = h @ C[t]
    if D is not None:
        y = y + np.asarray(D) * x
    return y


# ---------------------------------------------------------------------------
# compiled block kernels; state layout (K, n, d) keeps d contiguous
# ---------------------------------------------------------------------------

@_jit
def _fwd_block(em, x, Bm, Cm, invA, Dsk, h, y, one, t0):
    K, T, N, D = em.shape
    for k in range(K):
        hk = h[k]
        for t in range(T):
            tt = t0 + t
            yt = y[k, tt]
            xt = x[k, tt]
            for d in range(D):
                yt[d] = Dsk[k, d] * xt[d]
            for n in range(N):
                bn = Bm[k, tt, n]
                cn = Cm[k, tt, n]
                et = em[k, t, n]
                ia = invA[k, n]
                hn = hk[n]
                for d in range(D):
                    e = et[d]
                    hv = (e + one) * hn[d] + e * ia[d] * bn * xt[d]
                    hn[d] = hv
                    yt[d] += hv * cn


@_jit
def _bwd_block(em, x, dt, Bm, Cm, A, invA, Dsk, h0, dy, dh, dx, ddt, dB, dC, dA, dD, one, zero, t0):
    K, T, N, D = em.shape
    hbuf = np.empty((T + 1, N, D), em.dtype)
    for k in range(K):
        hbuf[0] = h0[k]
        for t in range(T):
            xt = x[k, t0 + t]
            for n in range(N):
                bn = Bm[k, t0 + t, n]
                et = em[k, t, n]
                ia = invA[k, n]
                hp = hbuf[t, n]
                hc = hbuf[t + 1, n]
                for d in range(D):
                    e = et[d]
                    hc[d] = (e + one) * hp[d] + e * ia[d] * bn * xt[d]
        dhk = dh[k]
        for t in range(T - 1, -1, -1):
            tt = t0 + t
            xt = x[k, tt]
            dyt = dy[k, tt]
            dxt = dx[k, tt]
            ddtt = ddt[k, tt]
            dtt = dt[k, tt]
            for d in range(D):
                dxt[d] = dyt[d] * Dsk[k, d]
                dD[k, d] += dyt[d] * xt[d]
                ddtt[d] = zero
            for n in range(N):
                bn = Bm[k, tt, n]
                cn = Cm[k, tt, n]
                et = em[k, t, n]
                ia = invA[k, n]
                an = A[k, n]
                hp = hbuf[t, n]
                hc = hbuf[t + 1, n]
                dhn = dhk[n]
                dAn = dA[k, n]
                accC = zero
                accB = zero
                for d in range(D):
                    g = dhn[d] + dyt[d] * cn
                    accC += dyt[d] * hc[d]
                    e = et[d]
                    a = e + one
                    c = e * ia[d]
                    xv = xt[d]
                    dc = g * bn * xv
                    accB += g * c * xv
                    dxt[d] += g * c * bn
                    # h = a*h_prev + c*B*x with a = exp(z), c = expm1(z)/A, z = dt*A
                    dz = (g * hp[d] + dc * ia[d]) * a
                    ddtt[d] += dz * an[d]
                    dAn[d] += dz * dtt[d] - dc * c * ia[d]
                    dhn[d] = g * a
                dC[k, tt, n] = accC
                dB[k, tt, n] = accB


@_jit
def _block_z(dt, A, out, t0):
    K, T, N, D = out.shape
    for k in range(K):
        for t in range(T):
            dtt = dt[k, t0 + t]
            for n in range(N):
                an = A[k, n]
                o = out[k, t, n]
                for d in range(D):
                    o[d] = dtt[d] * an[d]


def _block_exp(dt, A, s, e, buf):
    # expm1(dt * A) as (K, T, n, d), written into a reused buffer
    out = buf if e - s == buf.shape[1] else np.empty((buf.shape[0], e - s) + buf.shape[2:], buf.dtype)
    _block_z(dt, A, out, s)
    return np.expm1(out, out=out)


def _exp_buffer(x, A, block):
    K, L, D = x.shape
    return np.empty((K, min(block, L), A.shape[1], D), dtype=x.dtype)


def scan_forward(x, dt, A, Bm, Cm, Dsk, block: int = BLOCK):
    """Blocked forward over K independent sequences.

    ``x``/``dt`` (K, L, d); ``A`` (K, n, d); ``Bm``/``Cm`` (K, L, n); ``Dsk`` (K, d).
    Returns ``(y, boundary_states)``.
    """
    K, L, D = x.shape
    one = x.dtype.type(1)
    invA = one / A
    y = np.empty_like(x)
    h = np.zeros((K, A.shape[1], D), dtype=x.dtype)
    nblk = -(-L // block)
    hs = np.empty((nblk,) + h.shape, dtype=x.dtype)
    buf = _exp_buffer(x, A, block)
    for i in range(nblk):
        s, e = i * block, min(L, (i + 1) * block)
        hs[i] = h
        _fwd_block(_block_exp(dt, A, s, e, buf), x, Bm, Cm, invA, Dsk, h, y, one, s)
    return y, hs


def scan_backward(dy, x, dt, A, Bm, Cm, Dsk, hs, block: int = BLOCK):
    K, L, D = x.shape
    one, zero = x.dtype.type(1), x.dtype.type(0)
    invA = one / A
    dx, ddt = np.empty_like(x), np.empty_like(x)
    dB, dC = np.empty_like(Bm), np.empty_like(Cm)
    dA, dD = np.zeros_like(A), np.zeros_like(Dsk)
    dh = np.zeros((K, A.shape[1], D), dtype=x.dtype)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    buf = _exp_buffer(x, A, block)
    for i in range(hs.shape[0] - 1, -1, -1):
        s, e = i * block, min(L, (i + 1) * block)
        _bwd_block(_block_exp(dt, A, s, e, buf), x, dt, Bm, Cm, A, invA, Dsk, hs[i], dy, dh,
                   dx, ddt, dB, dC, dA, dD, one, zero, s)
    return dx, ddt, dA, dB, dC, dD


def scan(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, Dskip: Tensor, block: int = BLOCK) -> Tensor:
    """Differentiable selective scan over grouped sequences.

    ``x``/``delta`` (G, b, L, d); ``A`` (G, d, n) and must be negative;
    ``Bm``/``Cm`` (G, b, L, n); ``Dskip`` (G, d). Each group g has its own
    ``A``/``Dskip``, shared across the b sequences of that group.
    """
    G, b, L, D = x.shape
    N = A.shape[2]
    if delta.shape != x.shape:
        raise ValueError(f"scan: delta {delta.shape} does not match x {x.shape}")
    if A.shape != (G, D, N) or Dskip.shape != (G, D):
        raise ValueError(f"scan: A {A.shape} / D {Dskip.shape} do not match groups {G} and width {D}")
    if Bm.shape != (G, b, L, N) or Cm.shape != (G, b, L, N):
        raise ValueError(f"scan: B {Bm.shape} / C {Cm.shape} expected {(G, b, L, N)}")
    K = G * b
    xd = np.ascontiguousarray(x.data.reshape(K, L, D))
    dtd = np.ascontiguousarray(delta.data.reshape(K, L, D))
    Bd = np.ascontiguousarray(Bm.data.reshape(K, L, N))
    Cd = np.ascontiguousarray(Cm.data.reshape(K, L, N))
    Ak = np.ascontiguousarray(np.broadcast_to(A.data.transpose(0, 2, 1)[:, None], (G, b, N, D)).reshape(K, N, D))
    Dk = np.ascontiguousarray(np.broadcast_to(Dskip.data[:, None], (G, b, D)).reshape(K, D))
    y, hs = scan_forward(xd, dtd, Ak, Bd, Cd, Dk, block)
    sign = fault_sign("scan")

    def backward(g):
        dx, ddt, dA, dB, dC, dD = scan_backward(g.reshape(K, L, D), xd, dtd, Ak, Bd, Cd, Dk, hs, block)
        dA = dA.reshape(G, b, N, D).sum(axis=1).transpose(0, 2, 1)
        dD = dD.reshape(G, b, D).sum(axis=1)
        return (sign * dx.reshape(x.shape), ddt.reshape(x.shape), np.ascontiguousarray(dA),
                dB.reshape(Bm.shape), dC.reshape(Cm.shape), dD)

    return make_result(y.reshape(G, b, L, D), (x, delta, A, Bm, Cm, Dskip), backward, "scan")


def scan_reference(x, delta, A, Bm, Cm, Dskip):
    """Same contract as :func:`scan` on plain arrays, via the per-step loop."""
    G, b, L, D = x.shape
    y = np.empty_like(x)
    for g in range(G):
        for i in range(b):
            Abar, Bbar = zoh_discretize(A[g][None], Bm[g, i][:, None, :], delta[g, i][:, :, None])
            y[g, i] = ssm_scan_sequential(Abar, Bbar, Cm[g, i], x[g, i], Dskip[g])
    return y
