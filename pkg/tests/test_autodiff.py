import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconet.autodiff import (
    Adam,
    AdamState,
    CheckpointError,
    NumericError,
    Tape,
    Tensor,
    adam_step,
    backward,
    check_gradients,
    checked,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
)
from iconet.autodiff.checkpoint import decode_checkpoint, encode_checkpoint


def leaf(a):
    return Tensor(a, requires_grad=True)


def weighted(out, rng):
    return ops.sum(ops.mul(out, Tensor(rng.standard_normal(out.shape))))


# -- linear ------------------------------------------------------------------

def test_linear_identity():
    y = ops.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [1, 2])


def test_linear_hand_arithmetic():
    y = ops.linear(Tensor([1.0, 1.0]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(y.data, [6])


def test_linear_gradient_matches_finite_differences(rng):
    x, W, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2))), leaf(rng.standard_normal(2))
    errs = check_gradients(lambda: ops.sum(ops.linear(x, W, b)), [x, W, b])
    assert max(errs.values()) < 1e-6


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 4)))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(ops.conv2d(x, Tensor(k)).data, x.data)


def test_conv_all_ones_on_constant_input():
    y = ops.conv2d(Tensor(np.full((1, 1, 5, 5), 5.0)), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert y.data[0, 0, 2, 2] == 45.0
    assert y.data[0, 0, 0, 0] == 20.0  # corner sees 4 pixels


def test_depthwise_keeps_channels_apart(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    x[:, 0] = 0.0
    y = ops.conv2d(Tensor(x), Tensor(rng.standard_normal((2, 1, 3, 3))), padding=1, groups=2)
    assert np.all(y.data[:, 0] == 0.0)
    assert np.any(y.data[:, 1] != 0.0)


def test_conv_output_size_formula(rng):
    x = Tensor(rng.standard_normal((1, 2, 9, 7)))
    y = ops.conv2d(x, Tensor(rng.standard_normal((4, 2, 3, 3))), stride=2, padding=1)
    assert y.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_matches_direct_cross_correlation(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    y = ops.conv2d(Tensor(x), Tensor(k), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * k[o])
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_group_mismatch_errors():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)


@pytest.mark.parametrize("groups,stride", [(1, 1), (2, 1), (1, 2), (4, 1)])
def test_conv_gradients(rng, groups, stride):
    x = leaf(rng.standard_normal((2, 4, 5, 5)))
    k = leaf(rng.standard_normal((4, 4 // groups, 3, 3)))
    b = leaf(rng.standard_normal(4))
    errs = check_gradients(lambda: weighted(ops.conv2d(x, k, b, stride=stride, padding=1, groups=groups),
                                            np.random.default_rng(0)), [x, k, b])
    assert max(errs.values()) < 1e-6


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_input():
    y = ops.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, [0, 0, 0])


def test_layer_norm_already_normalized():
    y = ops.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(y.data, [-1, 1], atol=1e-15)


def test_layer_norm_zero_mean(rng):
    y = ops.layer_norm(Tensor(rng.standard_normal((5, 7)) * 3 + 2), Tensor(np.ones(7)), Tensor(np.zeros(7)))
    assert np.abs(y.data.mean(axis=-1)).max() < 1e-10


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng.standard_normal((3, 6))), leaf(rng.standard_normal(6)), leaf(rng.standard_normal(6))
    errs = check_gradients(lambda: weighted(ops.layer_norm(x, g, b), np.random.default_rng(1)), [x, g, b])
    assert max(errs.values()) < 1e-5


def test_layer_norm_rejects_mismatched_affine():
    with pytest.raises(ValueError):
        ops.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- pointwise -------------------------------------------------------------------

def test_pointwise_values():
    assert ops.relu(Tensor([-2.0])).item() == 0.0
    assert ops.relu(Tensor([3.0])).item() == 3.0
    assert ops.sigmoid(Tensor([0.0])).item() == 0.5
    assert abs(ops.softplus(Tensor([0.0])).item() - np.log(2)) < 1e-15


def test_pointwise_ranges_at_extremes():
    x = Tensor([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = ops.sigmoid(x).data
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))
    sp = ops.softplus(x).data
    assert np.all(sp >= 0) and np.all(np.isfinite(sp))
    assert sp[-1] == 800.0


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "silu", "softplus", "exp"])
def test_pointwise_gradients(rng, kind):
    data = rng.standard_normal((4, 5))
    data[np.abs(data) < 1e-2] = 0.3
    x = leaf(data)
    errs = check_gradients(lambda: weighted(ops.pointwise(x, kind), np.random.default_rng(2)), [x])
    assert errs[0] < 1e-6


def test_abs_subgradient_is_zero_at_kink():
    x = leaf([0.0, -2.0, 3.0])
    backward(ops.sum(ops.abs(x)))
    np.testing.assert_array_equal(x.grad, [0, -1, 1])


# -- pooling, shuffle, unfold ------------------------------------------------------

def test_global_avg_pool_values():
    assert ops.global_avg_pool(Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])).item() == 4.0
    assert ops.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).item() == 2.5
    assert ops.global_avg_pool(Tensor([[[[9.0]]]])).item() == 9.0


def test_pixel_shuffle_block_layout():
    x = Tensor(np.arange(1.0, 5.0).reshape(1, 4, 1, 1))
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 2).data[0, 0], [[1, 2], [3, 4]])


def test_pixel_shuffle_round_trip_and_sum(rng):
    x = Tensor(rng.standard_normal((2, 8, 3, 5)))
    y = ops.pixel_shuffle(x, 2)
    assert y.shape == (2, 2, 6, 10)
    np.testing.assert_array_equal(ops.pixel_unshuffle(y, 2).data, x.data)
    np.testing.assert_array_equal(np.sort(y.data.ravel()), np.sort(x.data.ravel()))


def test_pixel_shuffle_divisibility_error():
    with pytest.raises(ValueError):
        ops.pixel_shuffle(Tensor(np.ones((1, 6, 2, 2))), 2)


def test_unfold_k1_columns_are_pixels():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(ops.unfold(x, 1).data[0], [[1, 2, 3, 4]])


def test_unfold_border_padding():
    cols = ops.unfold(Tensor([[[[7.0]]]]), 3, padding=1).data[0, :, 0]
    expected = np.zeros(9)
    expected[4] = 7.0
    np.testing.assert_array_equal(cols, expected)


def test_unfold_rejects_even_kernel_and_oversize():
    with pytest.raises(ValueError):
        ops.unfold(Tensor(np.ones((1, 1, 4, 4))), 2)
    with pytest.raises(ValueError):
        ops.unfold(Tensor(np.ones((1, 1, 2, 2))), 5, padding=1)


def test_fold_unfold_identity_exact(rng):
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    np.testing.assert_array_equal(ops.fold(ops.unfold(x, 3, 1), (5, 5), 3, 3, 1).data, x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.integers(0, 2**31 - 1))
def test_fold_unfold_identity_property(c, h, w, k, seed):
    pad = k // 2
    x = Tensor(np.random.default_rng(seed).standard_normal((1, c, h, w)))
    np.testing.assert_array_equal(ops.fold(ops.unfold(x, k, pad), (h, w), c, k, pad).data, x.data)


# -- losses and backward -------------------------------------------------------------

def test_l1_loss_values():
    assert ops.l1_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert ops.l1_loss(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == 1.5


def test_l1_gradient_is_sign_over_n(rng):
    a = leaf(rng.standard_normal(6))
    b = a.data + np.array([0.5, -0.5, 0.2, -0.3, 0.4, -0.1])
    backward(ops.l1_loss(a, b))
    np.testing.assert_array_equal(a.grad, np.sign(a.data - b) / 6)
    assert check_gradients(lambda: ops.l1_loss(a, b), [a])[0] < 1e-6


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        ops.l1_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_square():
    x = leaf([3.0])
    backward(ops.sum(ops.mul(x, x)))
    assert x.grad[0] == 6.0


def test_backward_sum_of_two():
    x, y = leaf([1.0]), leaf([2.0])
    backward(ops.sum(ops.add(x, y)))
    assert x.grad[0] == 1.0 and y.grad[0] == 1.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(ops.mul(leaf([1.0, 2.0]), 2.0))


def test_unreachable_leaf_gets_zero_grad():
    x, unused = leaf([1.0, 2.0]), leaf([5.0])
    backward(ops.sum(x), leaves=[x, unused])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_gradients_accumulate_over_reuse():
    x = leaf([2.0])
    y = ops.add(ops.mul(x, 3.0), ops.mul(x, x))
    backward(ops.sum(y))
    assert x.grad[0] == 3.0 + 4.0


def test_tape_is_topological(rng):
    x = leaf(rng.standard_normal((2, 3)))
    W = leaf(rng.standard_normal((3, 3)))
    loss = ops.sum(ops.silu(ops.linear(ops.relu(ops.linear(x, W)), W)))
    tape = Tape.record(loss)
    assert tape.is_topological()
    backward(loss)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_broadcasting_is_rejected():
    with pytest.raises(ValueError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_checked_mode_rejects_nan():
    with checked():
        with pytest.raises(NumericError):
            ops.exp(Tensor([1000.0]))
    ops.exp(Tensor([1000.0]))  # unchecked: inf passes through


def test_tensor_rejects_integer_and_empty():
    with pytest.raises(TypeError):
        Tensor(np.array([1, 2]), dtype=np.int64)
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_determinism_of_composed_graph():
    def run():
        rng = np.random.default_rng(7)
        x, W = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 5)))
        loss = ops.sum(ops.sigmoid(ops.linear(ops.silu(ops.linear(x, W)), W)))
        backward(loss)
        return loss.data.tobytes(), W.grad.tobytes()
    assert run() == run()


# -- adam ----------------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign(rng):
    p = rng.standard_normal(5)
    g = rng.standard_normal(5)
    state = AdamState(lr=1e-3)
    new = adam_step([p], [g], state)[0]
    np.testing.assert_allclose(new - p, -1e-3 * np.sign(g), rtol=1e-6)
    assert state.t == 1


def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    state = AdamState(lr=0.1)
    for _ in range(10):
        (p2,) = adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p2, p)
    assert state.t == 10


def test_adam_converges_on_quadratic():
    x = leaf([0.0])
    opt = Adam([x], lr=0.1)
    for _ in range(200):
        d = ops.sub(x, 2.0)
        backward(ops.sum(ops.mul(d, d)))
        opt.step()
        opt.zero_grad()
    assert abs(x.data[0] - 2.0) < 0.1


def test_adam_checked_mode_nan():
    with checked():
        with pytest.raises(FloatingPointError):
            adam_step([np.ones(2)], [np.array([np.nan, 0.0])], AdamState())


def test_adam_zero_lr_is_byte_identical(rng):
    p = rng.standard_normal(4)
    (p2,) = adam_step([p], [rng.standard_normal(4)], AdamState(lr=0.0))
    assert p2.tobytes() == p.tobytes()


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_exact(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
               "s": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, {"step": 7, "note": "two words"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": "7", "note": "two words"}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype and np.array_equal(loaded[k], v)
    save_checkpoint(tmp_path / "again.ckpt", loaded, meta)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_is_documented_text(rng):
    blob = encode_checkpoint({"w": np.ones((2, 3))}, {"k": 1})
    head = blob.split(b"end\n")[0].decode()
    assert head.splitlines() == ["ICONET-CHECKPOINT", "version 1", "meta k 1", "tensor w f64 2,3"]
    assert blob.endswith(np.ones(6, dtype="<f8").tobytes())


@pytest.mark.parametrize("mutate", [
    lambda b: b"XX" + b[2:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b.replace(b"f64", b"i32"),
])
def test_checkpoint_corruption_detected(mutate):
    blob = encode_checkpoint({"w": np.ones((2, 3))})
    with pytest.raises(CheckpointError):
        decode_checkpoint(mutate(blob))


def test_checkpoint_rejects_whitespace_names():
    with pytest.raises(CheckpointError):
        encode_checkpoint({"bad name": np.ones(2)})
