import math

import numpy as np
import pytest

from iconet.autodiff import Adam, Tensor, backward, default_dtype, ops
from iconet.data import bicubic_resize, degrade_kspace, fft2, ifft2, make_phantom
from iconet.metrics import psnr
from iconet.nn import Conv2d, Linear
from iconet.pipeline import (
    BranchConfig,
    ICONet,
    PipelineConfig,
    RecBranch,
    SRBranch,
    StageOutput,
    format_param_report,
    hr_pyramid,
    iconet_forward,
    multi_stage_loss,
    param_report,
)
from iconet.training import TrainConfig, load_model, superresolve, train_loop

TINY = dict(channels=8, rscfl_count=1, d_state=4)


def image(rng, size):
    return Tensor(rng.random((1, 1, size, size)))


# -- configuration ----------------------------------------------------------------------

def test_stage_counts():
    assert PipelineConfig(scale=2).stages == 1
    assert PipelineConfig(scale=4).stages == 2


@pytest.mark.parametrize("kwargs,word", [
    (dict(scale=3), "scale"), (dict(alpha=1.5), "alpha"), (dict(alpha=0.0), "alpha"),
    (dict(variant="nope"), "variant"), (dict(channels=4), "channels"), (dict(rscfl_count=0), "rscfl_count"),
    (dict(rscfl_count=3, fusion_after=4), "fusion_after"),
])
def test_config_validation(kwargs, word):
    with pytest.raises(ValueError, match=word):
        PipelineConfig(**kwargs)


def test_branch_config_validation():
    with pytest.raises(ValueError):
        BranchConfig(kind="other")
    with pytest.raises(ValueError):
        BranchConfig(rscfl_count=0)


def test_defaults_and_aliases():
    cfg = PipelineConfig(variant="with_fusion")
    assert cfg.variant == "full"
    assert (cfg.channels, cfg.rscfl_count, cfg.alpha) == (96, 7, 0.9)
    assert cfg.fusion_point == 4
    assert PipelineConfig.from_meta({k: str(v) for k, v in cfg.to_meta().items()}) == cfg


# -- branches --------------------------------------------------------------------------------

def test_rec_branch_zero_head_is_identity(rng):
    rec = RecBranch(BranchConfig(kind="reconstruction", **TINY), rng)
    rec.head.weight.data[...] = 0.0
    rec.head.bias.data[...] = 0.0
    x = image(rng, 16)
    out, feats = rec(x)
    assert np.array_equal(out.data, x.data)
    assert feats.shape == (1, 8, 16, 16)


def test_rec_branch_shape(rng):
    rec = RecBranch(BranchConfig(kind="reconstruction", **TINY), rng)
    assert rec(image(rng, 64))[0].shape == (1, 1, 64, 64)


def test_rec_branch_rejects_non_finite(rng):
    rec = RecBranch(BranchConfig(kind="reconstruction", **TINY), rng)
    bad = np.zeros((1, 1, 8, 8))
    bad[0, 0, 2, 2] = np.nan
    with pytest.raises(FloatingPointError):
        rec(Tensor(bad))


def test_sr_branch_doubles(rng):
    sr = SRBranch(BranchConfig(**TINY), rng, fusion_after=1)
    out, feats, _ = sr(image(rng, 32), Tensor(rng.standard_normal((1, 8, 32, 32))))
    assert out.shape == (1, 1, 64, 64)


def test_sr_branch_misaligned_features(rng):
    sr = SRBranch(BranchConfig(**TINY), rng, fusion_after=1)
    with pytest.raises(ValueError, match="aligned"):
        sr(image(rng, 16), Tensor(np.zeros((1, 8, 8, 8))))


def test_fusion_disabled_matches_control(rng):
    cfg = BranchConfig(channels=8, rscfl_count=2, d_state=4)
    with_fusion = SRBranch(cfg, np.random.default_rng(5), fusion_after=1)
    control = SRBranch(cfg, np.random.default_rng(6), fusion_after=1, use_fusion=False)
    control.load_state_dict({k: v for k, v in with_fusion.state_dict().items() if not k.startswith("fusion.")})
    x = image(rng, 12)
    assert np.array_equal(with_fusion(x)[0].data, control(x)[0].data)
    fused = with_fusion(x, Tensor(rng.standard_normal((1, 8, 12, 12))))[0].data
    assert not np.array_equal(fused, control(x)[0].data)


@pytest.mark.parametrize("fusion_after", [0, 1, 2])
def test_fusion_placement_is_configurable(rng, fusion_after):
    cfg = PipelineConfig(scale=2, channels=8, rscfl_count=2, d_state=4, fusion_after=fusion_after)
    model = ICONet(cfg, np.random.default_rng(0))
    out = model(image(rng, 8))
    assert out[0].fused is not None and out[0].fused.shape == (1, 8, 8, 8)


# -- full model --------------------------------------------------------------------------------

def test_scale_progression_64_to_256(rng):
    with default_dtype(np.float32):
        model = ICONet(PipelineConfig(scale=4, **TINY), np.random.default_rng(0))
        stages = iconet_forward(Tensor(rng.random((1, 1, 64, 64)), dtype=np.float32), model)
    dims = [(s.rec_image.shape[-1], s.sr_image.shape[-1]) for s in stages]
    assert dims == [(64, 128), (128, 256)]


def test_scale_two_is_one_stage(rng):
    model = ICONet(PipelineConfig(scale=2, **TINY), rng)
    stages = model(image(rng, 16))
    assert len(stages) == 1 and stages[0].sr_image.shape == (1, 1, 32, 32)


def test_second_stage_consumes_first_sr(rng):
    model = ICONet(PipelineConfig(scale=4, **TINY), rng)
    stages = model(image(rng, 8))
    rec2 = model.rec_branches[0](stages[0].sr_image)[0]
    assert np.array_equal(rec2.data, stages[1].rec_image.data)


def test_stage_sharing_flag(rng):
    shared = ICONet(PipelineConfig(scale=4, **TINY), rng)
    separate = ICONet(PipelineConfig(scale=4, share_stages=False, **TINY), rng)
    assert len(shared.sr_branches) == 1 and len(separate.sr_branches) == 2
    assert separate.num_parameters() == 2 * shared.num_parameters()


def test_parallel_differs_from_serial(rng):
    x = image(rng, 8)
    serial = ICONet(PipelineConfig(scale=2, variant="with_rec", **TINY), np.random.default_rng(3))
    parallel = ICONet(PipelineConfig(scale=2, variant="parallel_mode", **TINY), np.random.default_rng(3))
    assert not np.allclose(serial(x)[0].sr_image.data, parallel(x)[0].sr_image.data)


def test_base_only_has_no_reconstruction(rng):
    model = ICONet(PipelineConfig(scale=2, variant="base_only", **TINY), rng)
    assert model.rec_branches == []
    assert model(image(rng, 8))[0].rec_image is None


# -- loss ---------------------------------------------------------------------------------------

def constant_stage(sr_err, rec_err, size=4):
    sr = Tensor(np.zeros((1, 1, 2 * size, 2 * size)))
    rec = Tensor(np.zeros((1, 1, size, size)))
    return StageOutput(rec, sr), [np.full((1, 1, size, size), rec_err), np.full((1, 1, 2 * size, 2 * size), sr_err)]


def test_loss_hand_example():
    stage, pyr = constant_stage(1.0, 2.0)
    assert multi_stage_loss([stage], pyr, 0.9).item() == 0.9 * 1.0 + 0.1 * 2.0


def test_loss_perfect_prediction_is_zero():
    stage, pyr = constant_stage(0.0, 0.0)
    assert multi_stage_loss([stage], pyr, 0.9).item() == 0.0


def test_loss_decomposition_two_stages(rng):
    model = ICONet(PipelineConfig(scale=4, **TINY), rng)
    hr = make_phantom(1, 32)
    pyr = hr_pyramid(hr, 4)
    stages = model(Tensor(pyr[0][None, None]))
    targets = [p[None, None] for p in pyr]
    expected = (0.9 * (ops.l1_loss(stages[0].sr_image, targets[1]).item() + ops.l1_loss(stages[1].sr_image, targets[2]).item())
                + 0.1 * (ops.l1_loss(stages[0].rec_image, targets[0]).item() + ops.l1_loss(stages[1].rec_image, targets[1]).item()))
    assert math.isclose(multi_stage_loss(stages, targets, 0.9).item(), expected, rel_tol=1e-15)
    sr_only = sum(ops.l1_loss(s.sr_image, targets[i + 1]).item() for i, s in enumerate(stages))
    assert math.isclose(multi_stage_loss(stages, targets, 1.0).item(), sr_only, rel_tol=1e-15)
    single = 0.9 * ops.l1_loss(stages[1].sr_image, targets[2]).item() + 0.1 * ops.l1_loss(stages[1].rec_image, targets[1]).item()
    assert math.isclose(multi_stage_loss(stages, targets, 0.9, single_stage=True).item(), single, rel_tol=1e-15)


def test_loss_pyramid_mismatch():
    stage, pyr = constant_stage(1.0, 1.0)
    with pytest.raises(ValueError, match="pyramid"):
        multi_stage_loss([stage], pyr[:1], 0.9)


def test_hr_pyramid_levels():
    pyr = hr_pyramid(make_phantom(0, 64), 4)
    assert [p.shape for p in pyr] == [(16, 16), (32, 32), (64, 64)]
    assert np.array_equal(pyr[-1], make_phantom(0, 64))


# -- gradients -------------------------------------------------------------------------------------

def test_gradient_reaches_every_parameter_group(rng):
    model = ICONet(PipelineConfig(scale=2, channels=8, rscfl_count=2, d_state=4), rng)
    hr = rng.random((16, 16))
    pyr = [Tensor(p[None, None]) for p in hr_pyramid(hr, 2)]
    backward(multi_stage_loss(model(pyr[0]), pyr, 0.9))
    trainable = [(n, p) for n, p in model.named_parameters() if ".q_" not in n and ".k_" not in n]
    assert [n for n, p in trainable if p.grad is None or np.linalg.norm(p.grad) == 0] == []


def test_pipeline_gradient_check(rng):
    from iconet.autodiff import check_gradients_joint
    from iconet.verify import pipeline_outputs
    model = ICONet(PipelineConfig(scale=2, channels=8, rscfl_count=1, d_state=4), rng)
    x = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
    weights = [(Tensor(rng.standard_normal((1, 1, 8, 8))), Tensor(rng.standard_normal((1, 1, 16, 16))))]
    params = [p for n, p in model.named_parameters() if ".q_" not in n and ".k_" not in n]
    assert check_gradients_joint(lambda: pipeline_outputs(model, x, weights), [x] + params, max_entries=4) < 1e-4


# -- training behaviour --------------------------------------------------------------------------------

def small_run(**kw):
    pipe = PipelineConfig(scale=2, **TINY)
    return pipe, TrainConfig(**{"steps": 4, "lr": 1e-3, "batch_size": 2, "seed": 0, **kw})


def test_fifty_steps_reduce_loss():
    images = [make_phantom(s, 32) for s in range(4)]
    pipe = PipelineConfig(scale=2, **TINY)
    result = train_loop(images, pipe, TrainConfig(steps=50, lr=1e-3, batch_size=4))
    assert result.losses[-1] < result.losses[0]


def test_zero_lr_keeps_parameters_byte_identical():
    pipe, train = small_run(lr=0.0, steps=3)
    before = ICONet(pipe, np.random.default_rng(0)).state_dict()
    after = train_loop([make_phantom(0, 32)], pipe, train).model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_resume_reproduces_trajectory(tmp_path):
    images = [make_phantom(s, 32) for s in range(3)]
    pipe, full_cfg = small_run(steps=6, checkpoint_every=3, probe_every=2)
    full = train_loop(images, pipe, full_cfg, out_dir=tmp_path / "full")
    part_dir = tmp_path / "part"
    train_loop(images, pipe, TrainConfig(**{**full_cfg.__dict__, "steps": 3}), out_dir=part_dir)
    resumed = train_loop(images, pipe, full_cfg, out_dir=part_dir, resume=part_dir / "checkpoint.ckpt")
    assert [r.loss for r in resumed.records] == full.losses[3:]

    def losses(path):
        return [ln.split("\t")[:2] for ln in path.read_text().splitlines()]
    # the shorter run probes at its own last step, so only step/loss columns must agree
    assert losses(part_dir / "metrics.log") == losses(tmp_path / "full" / "metrics.log")
    assert (part_dir / "checkpoint.ckpt").read_bytes() == (tmp_path / "full" / "checkpoint.ckpt").read_bytes()


def test_checkpoint_reload_reproduces_outputs(tmp_path):
    pipe, train = small_run(steps=2)
    result = train_loop([make_phantom(0, 32)], pipe, train, out_dir=tmp_path)
    model, loaded_pipe, meta = load_model(tmp_path / "checkpoint.ckpt")
    assert loaded_pipe == pipe and meta["step"] == "2"
    lr = degrade_kspace(make_phantom(5, 32), 2)
    assert np.array_equal(superresolve(model, lr), superresolve(result.model, lr))


def test_nan_loss_aborts_with_dump(tmp_path):
    from iconet.training import NumericAbort
    pipe, train = small_run(steps=1)
    with pytest.raises(NumericAbort) as info:
        train_loop([np.full((32, 32), np.nan)], pipe, train, out_dir=tmp_path)
    assert info.value.dump is not None and info.value.dump.exists()
    assert np.isnan(np.load(info.value.dump)["level0"]).all()


def corrupt(img, keep):
    # zero-filled k-space truncation at full size: blur plus ringing
    spec = np.fft.fftshift(fft2(img))
    H = img.shape[0]
    mask = np.zeros_like(spec)
    lo = H // 2 - keep // 2
    mask[lo:lo + keep, lo:lo + keep] = 1
    return np.clip(ifft2(np.fft.ifftshift(spec * mask)).real, 0, 1)


def test_rec_branch_overfits_artifacts():
    clean = make_phantom(2, 32)
    dirty = corrupt(clean, 12)
    rec = RecBranch(BranchConfig(kind="reconstruction", channels=8, rscfl_count=1, d_state=4), np.random.default_rng(0))
    opt = Adam(rec.parameters(), lr=1e-3)
    x, target = Tensor(dirty[None, None]), clean[None, None]
    for _ in range(300):
        loss = ops.l1_loss(rec(x)[0], target)
        backward(loss)
        opt.step()
        opt.zero_grad()
    assert ops.l1_loss(rec(x)[0], target).item() < np.abs(dirty - clean).mean()


def test_sr_beats_bicubic_after_500_steps():
    hr = make_phantom(0, 32)
    lr = degrade_kspace(hr, 2)
    pipe = PipelineConfig(scale=2, channels=8, rscfl_count=1, d_state=4)
    with default_dtype(np.float32):
        result = train_loop([hr], pipe, TrainConfig(steps=500, lr=1e-3, batch_size=1, dtype="float32"))
    sr = np.clip(superresolve(result.model, lr.astype(np.float32)), 0, 1)
    assert psnr(sr, hr) > psnr(np.clip(bicubic_resize(lr, 2), 0, 1), hr)


# -- complexity report ---------------------------------------------------------------------------------------

def test_param_count_formulas(rng):
    assert Linear(2, 3, rng).num_parameters() == 9
    small, big = Conv2d(8, 8, 3, rng), Conv2d(16, 16, 3, rng)
    assert big.weight.size == 4 * small.weight.size
    assert big.num_parameters() == 9 * 16 * 16 + 16


def test_param_report_is_deterministic_and_consistent(rng):
    model = ICONet(PipelineConfig(scale=4, channels=16, rscfl_count=3), np.random.default_rng(0))
    r1, r2 = param_report(model, 32, 32), param_report(model, 32, 32)
    assert r1 == r2
    assert sum(r1["groups"].values()) == r1["parameters"] == model.num_parameters()
    assert r1["flops"] > 0
    text = format_param_report(r1)
    assert f"{r1['parameters']:,}" in text and "0.996" in text
