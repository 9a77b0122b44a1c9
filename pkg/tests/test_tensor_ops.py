import numpy as np
import pytest

from msfin.core.exceptions import ShapeError, TapeError
from msfin.tensor import (
    DType,
    Parameter,
    Tape,
    Tensor,
    backward,
    channel_shuffle,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop,
    global_avg_pool,
    l1_loss,
    mean_all,
    mul,
    no_grad,
    pad_to_multiple,
    pixel_shuffle,
    reflect_pad,
    relu,
    sum_all,
)


def naive_conv2d(x, w, b, stride, padding, groups):
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    per_group = c_out // groups
    for b_i in range(n):
        for o in range(c_out):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b_i, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b_i, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 3), (2, 1, 6), (1, 2, 2)])
def test_conv2d_matches_nested_loop_oracle(rng, stride, padding, groups):
    x = rng.standard_normal((2, 6, 7, 8))
    w = rng.standard_normal((6, 6 // groups, 3, 3))
    b = rng.standard_normal(6)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, 6, 1, 1)), stride, padding, groups)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding, groups), atol=1e-6)


def test_conv2d_examples():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    assert conv2d(x, w).data.reshape(-1).tolist() == [9.0]
    padded = conv2d(x, w, padding=1).data[0, 0]
    np.testing.assert_array_equal(padded, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv2d_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 6, 5, 5)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((6, 6, 3, 3))), groups=4)
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((6, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 6, 2, 2))), Tensor(rng.standard_normal((6, 6, 3, 3))))


def test_conv_transpose2d_doubles_extent_and_is_conv_adjoint(rng):
    x = rng.standard_normal((1, 4, 5, 6))
    w = rng.standard_normal((4, 3, 4, 4))
    y = conv_transpose2d(Tensor(x), Tensor(w))
    assert y.shape == (1, 3, 10, 12)
    cotangent = rng.standard_normal(y.shape)
    back = conv2d(Tensor(cotangent), Tensor(w), stride=2, padding=1)
    assert np.vdot(y.data, cotangent) == pytest.approx(np.vdot(x, back.data), rel=1e-9)


def test_pixel_shuffle_layout():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 2, 2)
    y = pixel_shuffle(Tensor(x), 2).data[0, 0]
    np.testing.assert_array_equal(y, [[0, 4, 1, 5], [8, 12, 9, 13], [2, 6, 3, 7], [10, 14, 11, 15]])
    with pytest.raises(ShapeError):
        pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)


def test_channel_shuffle_order():
    x = np.arange(6, dtype=np.float64).reshape(1, 6, 1, 1)
    y = channel_shuffle(Tensor(x), 2).data.reshape(-1)
    assert y.tolist() == [0, 3, 1, 4, 2, 5]
    assert channel_shuffle(channel_shuffle(Tensor(x), 2), 3).data.reshape(-1).tolist() == list(range(6))
    with pytest.raises(ShapeError):
        channel_shuffle(Tensor(x), 4)


def test_concat_pad_crop(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 5)))
    b = Tensor(rng.standard_normal((1, 1, 3, 5)))
    cat = concat_channels([a, b])
    assert cat.shape == (1, 3, 3, 5)
    padded = reflect_pad(cat, 2, 1)
    assert padded.shape == (1, 3, 5, 6)
    np.testing.assert_array_equal(padded.data[:, :, 3, :5], cat.data[:, :, 1])
    np.testing.assert_array_equal(padded.data[:, :, :3, 5], cat.data[:, :, :, 3])
    np.testing.assert_array_equal(crop(padded, 3, 5).data, cat.data)
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((1, 1, 4, 5)))])
    with pytest.raises(ShapeError):
        reflect_pad(cat, 3, 0)


def test_pad_to_multiple_mirrors_long_axes_and_replicates_short_ones():
    x = Tensor(np.arange(10.0).reshape(1, 1, 5, 2))
    padded = pad_to_multiple(x, 4)
    assert padded.shape == (1, 1, 8, 4)
    np.testing.assert_array_equal(padded.data[0, 0, :, 0], [0, 2, 4, 6, 8, 6, 4, 2])
    np.testing.assert_array_equal(padded.data[0, 0, 0], [0, 1, 1, 1])
    assert pad_to_multiple(Tensor(np.zeros((1, 1, 4, 8))), 4).shape == (1, 1, 4, 8)


def test_pad_to_multiple_gradient_accumulates_into_replicated_edge():
    x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward(sum_all(pad_to_multiple(x, 4)))
    np.testing.assert_array_equal(x.grad, [[[[4.0, 12.0]]]])


def test_pad_to_multiple_rejects_empty_input():
    with pytest.raises(ShapeError):
        pad_to_multiple(Tensor(np.zeros((1, 1, 0, 3))), 4)


def test_l1_loss_examples(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert l1_loss(Tensor(x), Tensor(x)).item() == 0.0
    assert l1_loss(Tensor(x + 0.25), Tensor(x)).item() == pytest.approx(0.25)
    with pytest.raises(ShapeError):
        l1_loss(Tensor(x), Tensor(x[:1]))


def test_l1_loss_gradient_is_sign_over_numel(rng):
    pred = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=DType.FLOAT64)
    target = Tensor(pred.data.copy(), dtype=DType.FLOAT64)
    target.data[0, 0, 0, 0] += 1.0
    target.data[0, 1, 2, 2] -= 1.0
    with Tape() as tape:
        tape.backward(l1_loss(pred, target))
    expected = np.zeros(pred.shape)
    expected[0, 0, 0, 0] = -1 / 18
    expected[0, 1, 2, 2] = 1 / 18
    np.testing.assert_allclose(pred.grad, expected)


def test_mul_broadcast_and_errors(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    s = rng.standard_normal((2, 3, 1, 1))
    np.testing.assert_allclose(mul(Tensor(x), Tensor(s)).data, x * s)
    with pytest.raises(ShapeError):
        mul(Tensor(x), Tensor(rng.standard_normal((1, 3, 1, 1))))


def test_reductions(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3), keepdims=True))
    assert sum_all(Tensor(x)).item() == pytest.approx(x.sum())
    assert mean_all(Tensor(x)).item() == pytest.approx(x.mean())


def test_tensor_must_be_4d():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 4)))


def test_mixed_dtypes_rejected():
    a = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    b = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    with pytest.raises(ShapeError):
        a + b


def test_backward_requires_scalar_loss_on_active_tape(rng):
    p = Parameter(rng.standard_normal((1, 1, 2, 2)), name="p")
    with Tape() as tape:
        out = relu(p)
        with pytest.raises(TapeError):
            tape.backward(out)
    with pytest.raises(TapeError):
        backward(sum_all(p))
    with Tape() as first:
        loss = sum_all(p)
    with Tape() as second:
        with pytest.raises(TapeError):
            second.backward(loss)
    assert len(first) == 1


def test_gradients_accumulate_on_shared_leaf(rng):
    p = Parameter(rng.standard_normal((1, 1, 2, 2)), name="p", dtype=DType.FLOAT64)
    with Tape() as tape:
        loss = sum_all(p + p * 2.0)
        grads = tape.backward(loss)
    np.testing.assert_allclose(p.grad, np.full(p.shape, 3.0))
    assert grads[p] is p.grad


def test_no_grad_records_nothing(rng):
    p = Parameter(rng.standard_normal((1, 1, 2, 2)), name="p")
    with Tape() as tape:
        with no_grad():
            sum_all(relu(p))
        assert len(tape) == 0
