import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from keepcore import ops
from keepcore.errors import FormatError, NumericError, ShapeError, TapeError
from keepcore.formats import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from keepcore.optim import AdamState, adam_step, cosine_lr
from keepcore.tensor import Tape, Tensor, backward, zeros_like

import gradcheck


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def grad_of(build, *arrays):
    tape = Tape()
    ts = [tape.watch(np.asarray(a, dtype=float)) for a in arrays]
    grads = backward(tape, build(*ts))
    return [grads[t].data for t in ts]


# --- elementwise -------------------------------------------------------------

def test_mul_definition():
    assert ops.mul(T([1, 2]), T([3, 4])).data.tolist() == [3.0, 8.0]


def test_add_zeros_is_identity():
    x = T(np.random.default_rng(0).normal(size=(3, 5)))
    assert np.array_equal(ops.add(x, zeros_like(x)).data, x.data)


def test_scalar_mul_definition():
    assert ops.scalar_mul(T([0.5, -0.5]), 2).data.tolist() == [1.0, -1.0]


def test_elementwise_dispatch():
    a, b = T([1.0, 2.0]), T([3.0, 5.0])
    assert ops.elementwise("sub", a, b).data.tolist() == [-2.0, -3.0]
    assert ops.elementwise("scalar_add", a, 1.5).data.tolist() == [2.5, 3.5]
    with pytest.raises(ValueError):
        ops.elementwise("div", a, b)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ops.add(T(np.zeros((2, 3))), T(np.zeros((3, 2))))
    assert "[2, 3]" in str(exc.value) and "[3, 2]" in str(exc.value)


def test_operator_sugar_matches_ops():
    a, b = T([1.0, -2.0]), T([0.5, 4.0])
    assert np.array_equal((a * b).data, ops.mul(a, b).data)
    assert np.array_equal((1 - a).data, [0.0, 3.0])
    assert np.array_equal((a / 2).data, [0.5, -1.0])


# --- sigmoid -----------------------------------------------------------------

def test_sigmoid_zero():
    assert ops.sigmoid(T(0.0)).item() == 0.5


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        hi = ops.sigmoid(T([40.0, 800.0])).data
        lo = ops.sigmoid(T([-800.0])).data
    assert np.all(np.abs(hi - 1.0) < 1e-12)
    assert lo[0] >= 0.0 and lo[0] < 1e-300


def test_sigmoid_derivative_at_one():
    (g,) = grad_of(lambda a: ops.sum_all(ops.sigmoid(a)), [1.0])
    h = 1e-5
    fd = (1 / (1 + math.exp(-(1 + h))) - 1 / (1 + math.exp(-(1 - h)))) / (2 * h)
    assert abs(g[0] - fd) / abs(fd) < 1e-6


# --- clamp / relu ------------------------------------------------------------

def test_clamp_definition():
    assert ops.clamp(T([-0.2, 0.5, 1.3]), 0, 1).data.tolist() == [0.0, 0.5, 1.0]


def test_clamp_inside_range_is_identity():
    x = np.random.default_rng(1).uniform(0, 1, (4, 4))
    assert np.array_equal(ops.clamp(T(x), 0, 1).data, x)


def test_clamp_gradient_outside_and_at_bounds_is_zero():
    (g,) = grad_of(lambda a: ops.sum_all(ops.clamp(a, 0, 1)), [1.3, 1.0, 0.0, 0.5])
    assert g.tolist() == [0.0, 0.0, 0.0, 1.0]


def test_clamp_rejects_empty_interval():
    with pytest.raises(ValueError):
        ops.clamp(T([0.5]), 1.0, 1.0)


def test_relu_definition_and_dead_gradient():
    assert ops.relu(T([-1, 0, 2])).data.tolist() == [0.0, 0.0, 2.0]
    (g,) = grad_of(lambda a: ops.sum_all(ops.relu(a)), [-1.0, 2.0])
    assert g.tolist() == [0.0, 1.0]


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_relu_idempotent(x):
    once = ops.relu(T(x))
    assert np.array_equal(ops.relu(once).data, once.data)


# --- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(2).normal(size=(3, 5, 6))
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1.0
    out = ops.conv2d(T(x), T(w), T(np.zeros(3))).data
    assert np.array_equal(out, x)


def test_conv_ones_kernel_on_one_hot():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = ops.conv2d(T(x), T(np.ones((1, 1, 3, 3))), T([0.0])).data[0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out, expected)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 4))
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[o, i, j] = (w[o] * xp[:, i:i + 3, j:j + 3]).sum() + b[o]
    assert np.allclose(ops.conv2d(T(x), T(w), T(b)).data, ref, rtol=0, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(4)
    xs, w, b = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched = ops.conv2d(T(xs), T(w), T(b)).data
    for n in range(3):
        assert np.allclose(batched[n], ops.conv2d(T(xs[n]), T(w), T(b)).data, atol=1e-12)


def test_conv_weight_gradient_fd():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    proj = rng.normal(size=(2, 4, 4))

    def f(arrs):
        return float((ops.conv2d(T(x), T(arrs[0]), T(b)).data * proj).sum())

    (g,) = grad_of(lambda wt: ops.sum_all(ops.mul(ops.conv2d(T(x), wt, T(b)), T(proj))), w)
    fd = gradcheck.numeric_grad(f, [w.copy()], 0)
    assert gradcheck.rel_error(g, fd) < 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(T(np.zeros((3, 4, 4))), T(np.zeros((1, 2, 3, 3))), T([0.0]))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.zeros((1, 4, 4))), T(np.zeros((1, 1, 2, 2))), T([0.0]))


# --- upsample / pooling ------------------------------------------------------

def test_upsample_replicates():
    out = ops.upsample_nearest(T([[1, 2], [3, 4]]), 2, 2).data
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_upsample_factor_one_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ops.upsample_nearest(T(x), 1, 1).data, x)


def test_upsample_backward_block_sums():
    (g,) = grad_of(lambda a: ops.sum_all(ops.upsample_nearest(a, 2, 2)), np.zeros((3, 2)))
    assert np.array_equal(g, np.full((3, 2), 4.0))


@given(arrays(np.float64, (2, 3, 2), elements=st.floats(-10, 10)), st.integers(1, 4), st.integers(1, 4))
def test_upsample_then_block_mean_is_identity(x, fh, fw):
    up = ops.upsample_nearest(T(x), fh, fw).data
    assert np.allclose(ops.block_mean(up, fh, fw), x, rtol=0, atol=1e-12)


# --- l1 ----------------------------------------------------------------------

def test_l1_definition():
    assert ops.l1_norm(T([1, -2, 0])).item() == 3.0


def test_l1_of_zeros_has_zero_gradient():
    (g,) = grad_of(ops.l1_norm, np.zeros(4))
    assert ops.l1_norm(T(np.zeros(4))).item() == 0.0
    assert np.array_equal(g, np.zeros(4))


def test_l1_gradient_is_sign():
    (g,) = grad_of(ops.l1_norm, [-2.0, 3.0])
    assert g.tolist() == [-1.0, 1.0]


@given(arrays(np.float64, (5,), elements=st.floats(-1e6, 1e6)))
def test_l1_nonnegative_and_zero_iff_zero(x):
    v = ops.l1_norm(T(x)).item()
    assert v >= 0
    assert (v == 0) == (not np.any(x))


# --- segmentation losses -----------------------------------------------------

def test_losses_saturated_correct_prediction():
    y = np.random.default_rng(6).integers(0, 3, (4, 4))
    logits = 25.0 * ops.one_hot(y, 3)
    ce, dice = ops.seg_losses(T(logits), y)
    assert ce.item() < 1e-8
    assert dice.item() < 1e-6


def test_uniform_logits_give_ln2():
    y = np.random.default_rng(7).integers(0, 2, (5, 5))
    ce, _ = ops.seg_losses(T(np.zeros((2, 5, 5))), y)
    assert abs(ce.item() - math.log(2)) < 1e-12


def test_soft_dice_hand_value():
    # K=2 on a 1x2 image with uniform probabilities, labels [0, 1], s=1:
    # per class (2*0.5 + 1) / (1 + 1 + 1) = 2/3, loss = 1/3
    _, dice = ops.seg_losses(T(np.zeros((2, 1, 2))), np.array([[0, 1]]))
    assert abs(dice.item() - 1 / 3) < 1e-15


def test_loss_gradient_fd_2x4x4():
    rng = np.random.default_rng(8)
    for _ in range(5):
        assert gradcheck.check_case("seg_losses_sum", rng) < 1e-4


def test_label_out_of_range():
    with pytest.raises(ValueError):
        ops.cross_entropy(T(np.zeros((2, 2, 2))), np.array([[0, 1], [2, 0]]))


def test_soft_target_matches_hard_labels():
    y = np.array([[0, 1], [1, 1]])
    z = np.random.default_rng(9).normal(size=(2, 2, 2))
    a = ops.seg_losses(T(z), y)
    b = ops.seg_losses(T(z), ops.one_hot(y, 2))
    assert a[0].item() == pytest.approx(b[0].item(), abs=1e-15)
    assert a[1].item() == pytest.approx(b[1].item(), abs=1e-15)


# --- tape / backward ---------------------------------------------------------

def test_grad_of_sum_is_ones():
    (g,) = grad_of(ops.sum_all, np.zeros(3))
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_l1_sigmoid_temperature_fd():
    rng = np.random.default_rng(10)
    assert gradcheck.check_case("sigmoid_l1", rng) < 1e-5


def test_disconnected_parameter_gets_zeros():
    tape = Tape()
    x = tape.watch(np.ones(3))
    unused = tape.watch(np.ones((2, 2)))
    grads = backward(tape, ops.sum_all(x))
    assert np.array_equal(grads[unused].data, np.zeros((2, 2)))


def test_root_must_be_on_tape():
    t1, t2 = Tape(), Tape()
    root = ops.sum_all(t1.watch(np.ones(2)))
    with pytest.raises(TapeError):
        backward(t2, root)
    with pytest.raises(TapeError):
        backward(t1, Tensor(1.0))


def test_root_must_be_scalar():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, ops.scalar_mul(x, 2.0))


def test_tape_is_closed_after_backward():
    tape = Tape()
    x = tape.watch(np.ones(2))
    backward(tape, ops.sum_all(x))
    with pytest.raises(TapeError):
        ops.sum_all(x)


def test_mixing_tapes_rejected():
    a = Tape().watch(np.ones(2))
    b = Tape().watch(np.ones(2))
    with pytest.raises(TapeError):
        ops.add(a, b)


def test_tape_entries_reference_earlier_nodes():
    tape = Tape()
    x = tape.watch(np.ones((1, 4, 4)))
    w = tape.watch(np.ones((2, 1, 3, 3)))
    b = tape.watch(np.zeros(2))
    h = ops.relu(ops.conv2d(x, w, b))
    ops.sum_all(ops.sigmoid(h))
    for i, entry in enumerate(tape.nodes):
        assert all(p < i for p in entry.parents)


def test_shared_subexpression_accumulates():
    # d/dx sum(x*x + x) = 2x + 1
    x = np.array([1.0, -3.0])
    (g,) = grad_of(lambda a: ops.sum_all(ops.add(ops.mul(a, a), a)), x)
    assert g.tolist() == [3.0, -5.0]


def test_untracked_ops_record_nothing():
    out = ops.sigmoid(T([1.0]))
    assert not out.tracked


def test_nonfinite_output_rejected():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        ops.scalar_mul(T([1e308]), 10.0)


def test_rank_limit():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_deterministic_evaluation():
    rng = np.random.default_rng(11)
    x, w, b = rng.normal(size=(2, 2, 8, 8)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)

    def run():
        tape = Tape()
        xt = tape.watch(x)
        loss = ops.sum_all(ops.sigmoid(ops.conv2d(xt, T(w), T(b))))
        return loss.data.tobytes(), backward(tape, loss)[xt].data.tobytes()

    assert run() == run()


# --- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = T([1.0, -2.0])
    st_ = AdamState.zeros(2, lr=0.1)
    for _ in range(10):
        adam_step(p, np.zeros(2), st_)
    assert p.data.tolist() == [1.0, -2.0]
    assert st_.t == 10


def test_adam_first_step():
    p = T([0.0])
    adam_step(p, np.array([1.0]), AdamState.zeros(1, lr=0.1, beta1=0.9, beta2=0.999, eps_num=1e-8))
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_quadratic_converges():
    p = T([0.0])
    st_ = AdamState.zeros(1, lr=0.1)
    for _ in range(500):
        adam_step(p, 2 * (p.data - 3.0), st_)
    assert abs(p.data[0] - 3.0) < 1e-2


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(T([0.0, 0.0]), np.zeros(3), AdamState.zeros(2))


def test_adamw_decay_shrinks_without_gradient():
    p = T([2.0])
    adam_step(p, np.zeros(1), AdamState.zeros(1, lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


@pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (25, 5e-4), (50, 0.0)])
def test_cosine_schedule(epoch, expected):
    assert cosine_lr(1e-3, epoch, 50) == pytest.approx(expected, abs=1e-18)


# --- KCT1 --------------------------------------------------------------------

@settings(max_examples=50)
@given(st.integers(0, 4).flatmap(lambda r: arrays(
    np.float64, st.tuples(*[st.integers(1, 4)] * r), elements=st.floats(allow_nan=False, allow_infinity=False))))
def test_kct1_roundtrip(arr):
    buf = tensor_to_bytes(arr)
    back, end = tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr, dtype="<f8").tobytes()


def test_kct1_layout_by_hand():
    buf = tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"KCT1"
    assert buf[4] == 2
    assert struct.unpack("<II", buf[5:13]) == (1, 3)
    assert struct.unpack("<3d", buf[13:]) == (1.0, 2.0, 3.0)


def test_kct1_file_roundtrip(tmp_path):
    x = np.random.default_rng(12).normal(size=(2, 3, 4))
    save_tensor(tmp_path / "x.kct", x)
    assert np.array_equal(load_tensor(tmp_path / "x.kct"), x)


@pytest.mark.parametrize("cut,where", [(3, 0), (4, 4), (9, 5), (20, 13)])
def test_kct1_truncation_reports_offset(cut, where):
    buf = tensor_to_bytes(np.ones((2, 2)))[:cut]
    with pytest.raises(FormatError) as exc:
        tensor_from_bytes(buf)
    assert exc.value.offset == where


def test_kct1_bad_magic():
    with pytest.raises(FormatError) as exc:
        tensor_from_bytes(b"KCT2" + bytes(5))
    assert exc.value.offset == 0
