"""Property suite run by the ``verify`` command.

Each check returns ``(passed, detail)``. Checks run in f64 with small
shapes so the whole suite stays well inside a few minutes.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import oracles
from .autodiff import FAULTS, Adam, Tensor, backward, check_gradients, check_gradients_joint, default_dtype, no_grad, ops
from .blocks import CRB, RSCFL, VMB, CrbConfig, VmbConfig
from .data import degrade_kspace, fft2, ifft2
from .fusion import SRRecFusion, relevance_argmax, sab_relevance, sab_transfer
from .metrics import psnr, ssim
from .pipeline import ICONet, PipelineConfig, hr_pyramid, multi_stage_loss
from .ssm import SS2D, SelectiveScan, scan_reference, zoh_discretize
from .ssm.scan import scan

GRAD_TOL = 1e-4
CHECKS: list = []


def check(name: str):
    def register(fn: Callable):
        CHECKS.append((name, fn))
        return fn
    return register


def _param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _grad_ok(f, inputs, max_entries=8) -> tuple:
    errs = check_gradients(f, inputs, max_entries=max_entries)
    worst = max(errs.values())
    return worst < GRAD_TOL, f"max rel err {worst:.2e}"


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection keeps every output entry in play
    return ops.sum(ops.mul(out, Tensor(rng.standard_normal(out.shape))))


def _module_grad(module, inputs, fn, rng, skip=()):
    params = [p for n, p in module.named_parameters() if not any(s in n for s in skip)]
    w = Tensor(rng.standard_normal(fn().shape))
    err = check_gradients_joint(lambda: ops.sum(ops.mul(fn(), w)), list(inputs) + params, max_entries=4)
    return err < GRAD_TOL, f"joint rel err {err:.2e}"


@check("grad:linear")
def _():
    rng = np.random.default_rng(1)
    x, W, b = _param(rng, 3, 4), _param(rng, 4, 5), _param(rng, 5)
    w = Tensor(rng.standard_normal((3, 5)))
    return _grad_ok(lambda: ops.sum(ops.mul(ops.linear(x, W, b), w)), [x, W, b])


@check("grad:layer_norm")
def _():
    rng = np.random.default_rng(2)
    x, g, b = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
    w = Tensor(rng.standard_normal((3, 6)))
    return _grad_ok(lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w)), [x, g, b])


@check("grad:conv2d")
def _():
    rng = np.random.default_rng(3)
    x, k, b = _param(rng, 2, 4, 5, 5), _param(rng, 6, 2, 3, 3), _param(rng, 6)
    w = Tensor(rng.standard_normal((2, 6, 3, 3)))
    return _grad_ok(lambda: ops.sum(ops.mul(ops.conv2d(x, k, b, stride=2, padding=1, groups=2), w)), [x, k, b])


@check("grad:conv2d_depthwise")
def _():
    rng = np.random.default_rng(4)
    x, k, b = _param(rng, 1, 3, 5, 4), _param(rng, 3, 1, 3, 3), _param(rng, 3)
    w = Tensor(rng.standard_normal((1, 3, 5, 4)))
    return _grad_ok(lambda: ops.sum(ops.mul(ops.conv2d(x, k, b, padding=1, groups=3), w)), [x, k, b])


@check("grad:pointwise")
def _():
    rng = np.random.default_rng(5)
    worst = 0.0
    for kind in ("relu", "sigmoid", "silu", "softplus", "exp"):
        x = _param(rng, 4, 5)
        if kind == "relu":
            x.data[np.abs(x.data) < 1e-3] = 0.5  # keep away from the kink
        w = Tensor(rng.standard_normal((4, 5)))
        ok, detail = _grad_ok(lambda: ops.sum(ops.mul(ops.pointwise(x, kind), w)), [x])
        worst = max(worst, float(detail.split()[-1]))
        if not ok:
            return False, f"{kind}: {detail}"
    return True, f"max rel err {worst:.2e}"


@check("grad:pool_scale_shuffle")
def _():
    rng = np.random.default_rng(6)
    x, s = _param(rng, 2, 8, 3, 3), _param(rng, 2, 8)
    w = Tensor(rng.standard_normal((2, 2, 6, 6)))

    def f():
        y = ops.channel_scale(x, ops.sigmoid(ops.add(s, ops.global_avg_pool(x))))
        return ops.sum(ops.mul(ops.pixel_shuffle(y, 2), w))
    return _grad_ok(f, [x, s])


@check("grad:unfold_fold_gather")
def _():
    rng = np.random.default_rng(7)
    x = _param(rng, 2, 3, 4, 4)
    idx = rng.integers(0, 16, size=(2, 16))
    w = Tensor(rng.standard_normal((2, 3, 4, 4)))
    return _grad_ok(lambda: ops.sum(ops.mul(ops.fold(ops.gather_columns(ops.unfold(x, 3, 1), idx),
                                                     (4, 4), 3, 3, 1), w)), [x])


@check("grad:l1_loss")
def _():
    rng = np.random.default_rng(8)
    a = _param(rng, 3, 4)
    b = a.data + np.where(rng.random((3, 4)) > 0.5, 0.3, -0.3)
    return _grad_ok(lambda: ops.l1_loss(ops.scale(a, 1.0), b), [a])


@check("grad:selective_scan")
def _():
    rng = np.random.default_rng(9)
    G, b, L, d, n = 2, 1, 70, 3, 4
    x = _param(rng, G, b, L, d)
    dt = Tensor(rng.uniform(0.01, 0.5, (G, b, L, d)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2, (G, d, n)), requires_grad=True)
    B, C, D = _param(rng, G, b, L, n), _param(rng, G, b, L, n), _param(rng, G, d)
    w = Tensor(rng.standard_normal((G, b, L, d)))
    return _grad_ok(lambda: ops.sum(ops.mul(scan(x, dt, A, B, C, D), w)), [x, dt, A, B, C, D])


@check("grad:ss2d")
def _():
    rng = np.random.default_rng(10)
    layer = SS2D(8, rng, d_state=4)
    x = _param(rng, 1, 8, 4, 4)
    return _module_grad(layer, [x], lambda: layer(x), rng)


@check("grad:vmb")
def _():
    rng = np.random.default_rng(11)
    block = VMB(VmbConfig(8, d_state=4), rng)
    x = _param(rng, 1, 8, 6, 6)
    return _module_grad(block, [x], lambda: block(x), rng)


@check("grad:crb")
def _():
    rng = np.random.default_rng(12)
    block = CRB(CrbConfig(8), rng)
    x = _param(rng, 2, 8, 4, 4)
    return _module_grad(block, [x], lambda: block(x), rng)


@check("grad:rscfl")
def _():
    rng = np.random.default_rng(13)
    block = RSCFL(8, rng, d_state=4)
    x = _param(rng, 1, 8, 6, 6)
    return _module_grad(block, [x], lambda: block(x), rng)


@check("grad:fusion")
def _():
    rng = np.random.default_rng(14)
    fuse = SRRecFusion(8, rng)
    a, b = _param(rng, 1, 8, 5, 5), _param(rng, 1, 8, 5, 5)
    # the hard index carries no gradient, so query/key projections are excluded
    return _module_grad(fuse, [a, b], lambda: fuse(a, b), rng, skip=("q_", "k_"))


def pipeline_outputs(model, x: Tensor, weights) -> Tensor:
    """Random projection of every stage's Rec and SR images (a smooth scalar)."""
    total = None
    for stage, (w_rec, w_sr) in zip(model(x), weights):
        term = ops.sum(ops.mul(stage.sr_image, w_sr))
        if stage.rec_image is not None:
            term = ops.add(term, ops.sum(ops.mul(stage.rec_image, w_rec)))
        total = term if total is None else ops.add(total, term)
    return total


@check("grad:pipeline")
def _():
    rng = np.random.default_rng(15)
    model = ICONet(PipelineConfig(scale=2, channels=8, rscfl_count=1, d_state=4), rng)
    x = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
    weights = [(Tensor(rng.standard_normal((1, 1, 8, 8))), Tensor(rng.standard_normal((1, 1, 16, 16))))]
    return _module_grad(model, [x], lambda: pipeline_outputs(model, x, weights), rng, skip=(".q_", ".k_"))


@check("scan:blocked_vs_sequential")
def _():
    rng = np.random.default_rng(20)
    worst = 0.0
    for L in (1, 17, 64, 130, 300):
        G, b, d, n = 2, 2, 3, 4
        x = rng.standard_normal((G, b, L, d))
        dt = rng.uniform(1e-3, 0.5, (G, b, L, d))
        A = -rng.uniform(0.1, 4, (G, d, n))
        B, C, D = rng.standard_normal((G, b, L, n)), rng.standard_normal((G, b, L, n)), rng.standard_normal((G, d))
        fast = scan(Tensor(x), Tensor(dt), Tensor(A), Tensor(B), Tensor(C), Tensor(D)).data
        worst = max(worst, float(np.abs(fast - scan_reference(x, dt, A, B, C, D)).max()))
    return worst < 1e-10, f"max abs diff {worst:.1e}"


@check("scan:selective_vs_bruteforce")
def _():
    rng = np.random.default_rng(21)
    layer = SelectiveScan(6, rng, d_state=4)
    x = rng.standard_normal((1, 100, 6))
    diff = np.abs(layer(Tensor(x)).data[0] - oracles.selective_scan_bruteforce(layer, x[0])).max()
    return diff < 1e-10, f"max abs diff {diff:.1e}"


@check("scan:ss2d_vs_bruteforce")
def _():
    rng = np.random.default_rng(22)
    layer = SS2D(4, rng, d_state=3)
    worst = 0.0
    for H, W in ((4, 4), (5, 7), (1, 1)):
        x = rng.standard_normal((1, 4, H, W))
        worst = max(worst, float(np.abs(layer(Tensor(x)).data - oracles.ss2d_bruteforce(layer, x)).max()))
    return worst < 1e-10, f"max abs diff {worst:.1e}"


@check("zoh:euler_order")
def _():
    A, B = -1.3, 0.7
    errs = []
    for delta in (1e-1, 1e-2, 1e-3):
        Ab, Bb = zoh_discretize(np.array(A), np.array(B), np.array(delta))
        ea, eb = oracles.euler_zoh(A, B, delta, substeps=10)
        errs.append(abs(float(Ab) - ea) + abs(float(Bb) - eb))
    orders = [math.log10(errs[i] / errs[i + 1]) for i in range(2)]
    Ab, Bb = zoh_discretize(np.array(-2.0), np.array(3.0), np.array(1e-12))
    limit = abs(float(Ab) - 1) < 1e-9 and abs(float(Bb) - 3e-12) < 1e-9
    return min(orders) >= 1.8 and limit, f"observed orders {orders[0]:.2f}, {orders[1]:.2f}"


@check("fusion:relevance_invariance")
def _():
    rng = np.random.default_rng(30)
    Q, K = rng.standard_normal((20, 9)), rng.standard_normal((25, 9))
    R = sab_relevance(Q, K)
    R2 = sab_relevance(Q * rng.uniform(0.5, 4, (20, 1)), K * rng.uniform(0.5, 4, (25, 1)))
    same_idx = np.array_equal(relevance_argmax(Q, K), oracles.argmax_bruteforce(Q, K))
    diff = float(np.abs(R - R2).max())
    return diff < 1e-12 and same_idx and np.all(np.abs(R) <= 1), f"rescale diff {diff:.1e}"


@check("fusion:identity_index")
def _():
    rng = np.random.default_rng(31)
    fmap = Tensor(rng.standard_normal((1, 4, 6, 6)))
    P = ops.unfold(fmap, 3, 1).data[0].T
    sai = relevance_argmax(P, P)
    back = sab_transfer(ops.unfold(fmap, 3, 1), sai, (6, 6), 4)
    ok = np.array_equal(sai, np.arange(36)) and np.array_equal(back.data, fmap.data)
    return ok, "identity index restores the map exactly" if ok else "index or transfer mismatch"


@check("fusion:closed_forms")
def _():
    rng = np.random.default_rng(32)
    fuse = SRRecFusion(4, rng)
    f = Tensor(rng.standard_normal((1, 4, 5, 5)))
    a, b = Tensor(rng.standard_normal((1, 4, 5, 5))), Tensor(rng.standard_normal((1, 4, 5, 5)))
    fuse.sac.weight.data[:] = 0
    fuse.sac.bias.data[:] = 0
    out, bundle = fuse(a, b, return_bundle=True)
    half = 0.5 * (bundle.f_sab_sr.data + bundle.f_sab_rec.data)
    d1 = float(np.abs(out.data - half).max())
    for conv in (fuse.q_sr, fuse.k_rec, fuse.v_rec, fuse.q_rec, fuse.k_sr, fuse.v_sr):
        conv.weight.data[:] = 0
        conv.weight.data[:, :, 0, 0] = np.eye(4)
        conv.bias.data[:] = 0
    fuse.sac = type(fuse.sac)(8, 8, 3, rng)
    out, bundle = fuse(f, f, return_bundle=True)
    d2 = float(np.abs(out.data - f.data * (bundle.sac_sr.data + bundle.sac_rec.data)).max())
    return max(d1, d2) < 1e-10, f"max abs diff {max(d1, d2):.1e}"


@check("fft:naive_dft")
def _():
    rng = np.random.default_rng(40)
    x = rng.standard_normal((8, 8))
    diff = float(np.abs(fft2(x) - oracles.naive_dft2(x)).max())
    rt = float(np.abs(ifft2(fft2(x)).real - x).max())
    parseval = abs(np.sum(x ** 2) - np.sum(np.abs(fft2(x)) ** 2) / 64)
    return diff < 1e-9 and rt < 1e-10 and parseval < 1e-9, f"DFT diff {diff:.1e}, round trip {rt:.1e}"


@check("degrade:dc_and_linearity")
def _():
    rng = np.random.default_rng(41)
    dc = float(np.abs(degrade_kspace(np.full((32, 32), 0.37), 4) - 0.37).max())
    a, b = rng.random((16, 16)), rng.random((16, 16))
    lin = float(np.abs(degrade_kspace(a + b, 2, clamp=False) - degrade_kspace(a, 2, clamp=False)
                       - degrade_kspace(b, 2, clamp=False)).max())
    return dc < 1e-10 and lin < 1e-12, f"DC err {dc:.1e}, linearity err {lin:.1e}"


@check("metrics:closed_forms")
def _():
    rng = np.random.default_rng(42)
    a = rng.random((32, 32)) * 0.8
    p = psnr(a, a + 0.1)
    s = ssim(a, a)
    return abs(p - 20.0) < 1e-9 and s == 1.0 and math.isinf(psnr(a, a)), f"psnr {p:.6f} dB, ssim(a,a) {s}"


@check("autodiff:fold_unfold_identity")
def _():
    x = Tensor(np.random.default_rng(43).standard_normal((2, 3, 5, 5)))
    ok = np.array_equal(ops.fold(ops.unfold(x, 3, 1), (5, 5), 3, 3, 1).data, x.data)
    return ok, "exact" if ok else "mismatch"


@check("adam:quadratic")
def _():
    x = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        loss = ops.sum(ops.mul(ops.sub(x, 2.0), ops.sub(x, 2.0)))
        backward(loss)
        opt.step()
        opt.zero_grad()
    err = abs(float(x.data[0]) - 2)
    return err < 0.1, f"|x - 2| = {err:.3e}"


@check("pipeline:scale_contract")
def _():
    model = ICONet(PipelineConfig(scale=4, channels=8, rscfl_count=1, d_state=2), np.random.default_rng(44))
    with no_grad():
        stages = model(Tensor(np.random.default_rng(45).random((1, 1, 8, 8))))
    shapes = [(s.rec_image.shape[-1], s.sr_image.shape[-1]) for s in stages]
    pyr = hr_pyramid(np.random.default_rng(46).random((32, 32)), 4)
    ok = shapes == [(8, 16), (16, 32)] and [p.shape[0] for p in pyr] == [8, 16, 32]
    return ok, f"stage sizes {shapes}"


def run_checks(faults=(), log=None) -> list:
    """Run every check in f64; returns ``[(name, passed, detail, seconds)]``."""
    FAULTS.clear()
    FAULTS.update(faults)
    results = []
    try:
        with default_dtype(np.float64):
            for name, fn in CHECKS:
                t0 = time.perf_counter()
                try:
                    ok, detail = fn()
                except Exception as exc:  # a crashing check is a failing check
                    ok, detail = False, f"{type(exc).__name__}: {exc}"
                results.append((name, bool(ok), detail, time.perf_counter() - t0))
                if log is not None:
                    log(results[-1])
    finally:
        FAULTS.clear()
    return results


def format_row(row) -> str:
    name, ok, detail, secs = row
    return f"{'PASS' if ok else 'FAIL'}  {name:<32} {secs:6.2f}s  {detail}"
