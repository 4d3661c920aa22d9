import numpy as np
import pytest

from attnpose import tensor as T
from attnpose.gradcheck import check_gradients
from attnpose.tensor import ShapeError, Tensor


def rand(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ---- matmul ------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.5, -2.0], [0.25, 3.0]])
    out = eye @ m
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_arithmetic():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_gradcheck():
    a, b = rand((3, 4), 0), rand((4, 2), 1)
    assert check_gradients(lambda a, b: (a @ b).sum(), [a, b]) < 1e-6


def test_matmul_batched_gradcheck():
    a, b = rand((2, 3, 4), 2), rand((4, 5), 3)
    assert check_gradients(lambda a, b: ((a @ b) ** 2).sum(), [a, b]) < 1e-6


# ---- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_logit_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]), axis=0)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data[0], 1.0, atol=1e-12)


def test_softmax_rows_sum_to_one_and_nonnegative():
    rng = np.random.default_rng(4)
    out = T.softmax(Tensor(rng.standard_normal((6, 9)) * 3), axis=-1)
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradcheck():
    x = rand((5,), 5)
    w = Tensor(np.linspace(0.3, 1.7, 5))
    assert check_gradients(lambda x: (T.softmax(x, axis=0) * w).sum(), [x]) < 1e-6


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor([1.0, 2.0]), axis=3)


# ---- layer_norm ----------------------------------------------------------------


def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 6), 3.7))
    out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_moments():
    x = rand((4, 16), 6, scale=2.5)
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_gradcheck():
    x, g, b = rand((2, 6), 7), rand((6,), 8), rand((6,), 9)
    f = lambda x, g, b: (T.layer_norm(x, g, b) ** 2).sum()
    assert check_gradients(f, [x, g, b]) < 1e-5


def test_layer_norm_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 6))), Tensor(np.ones(5)), Tensor(np.zeros(6)))


# ---- gelu -----------------------------------------------------------------------


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_gradcheck():
    x = rand((8,), 10)
    assert check_gradients(lambda x: T.gelu(x).sum(), [x]) < 1e-6


# ---- conv2d ----------------------------------------------------------------------


def test_conv2d_1x1_identity():
    x = Tensor(np.random.default_rng(11).standard_normal((3, 4, 4)))
    k = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = T.conv2d(x, k)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_1x1_equals_per_pixel_matmul():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((3, 2, 2)))
    k = Tensor(rng.standard_normal((5, 3, 1, 1)))
    out = T.conv2d(x, k)
    # oracle: flatten pixels to rows, right-multiply by the channel matrix
    pix = x.data.reshape(3, 4).T  # [4, 3]
    expect = (pix @ k.data.reshape(5, 3).T).T.reshape(5, 2, 2)
    np.testing.assert_allclose(out.data, expect, atol=1e-14)


def test_conv2d_gradcheck():
    x, k = rand((1, 4, 4), 13), rand((2, 1, 3, 3), 14)
    f = lambda x, k: (T.conv2d(x, k, stride=1, padding=1) ** 2).sum()
    assert check_gradients(f, [x, k]) < 1e-5


def test_conv2d_strided_gradcheck():
    x, k = rand((2, 6, 6), 15), rand((3, 2, 3, 3), 16)
    f = lambda x, k: (T.conv2d(x, k, stride=2, padding=1) ** 2).sum()
    assert check_gradients(f, [x, k]) < 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 4, 1, 1))))


# ---- backward contract -----------------------------------------------------------


def test_backward_sum_gives_ones():
    x = rand((5,), 17)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_rejects_non_scalar():
    x = rand((3,), 18)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_backward_accumulates_until_zeroed():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_diamond_graph():
    # y = x used on two paths; adjoints must add
    x = Tensor([1.5], requires_grad=True)
    y = x * 2.0
    z = (y * y + y).sum()
    z.backward()
    # dz/dx = (2y + 1) * 2 = (6 + 1) * 2
    np.testing.assert_allclose(x.grad, [14.0])


def test_grad_populated_on_intermediates():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    y.sum().backward()
    assert y.grad is not None and x.grad is not None


# ---- misc ops ----------------------------------------------------------------------


def test_getitem_and_concat_gradcheck():
    a, b = rand((4, 3), 19), rand((2, 3), 20)
    f = lambda a, b: (T.concat([a[1:3], b], axis=0) ** 2).sum()
    assert check_gradients(f, [a, b]) < 1e-6


def test_gather_rows_with_repeats():
    a = rand((3, 2), 21)
    out = T.gather_rows(a, [0, 2, 0])
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_div_sqrt_exp_gradcheck():
    x = rand((6,), 22, scale=0.5)
    y = Tensor(np.random.default_rng(23).random(6) + 0.5, requires_grad=True)
    f = lambda x, y: (T.sqrt(T.exp(x) / y) * 2.0).sum()
    assert check_gradients(f, [x, y]) < 1e-5


def test_sqrt_subgradient_zero_at_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    T.sqrt(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_broadcast_add_reduces_grad():
    a, b = rand((3, 4), 24), rand((4,), 25)
    (a + b).sum().backward()
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))


def test_transpose_reshape_roundtrip_gradcheck():
    x = rand((2, 3, 4), 26)
    f = lambda x: (x.transpose((1, 0, 2)).reshape(3, 8) ** 2).sum()
    assert check_gradients(f, [x]) < 1e-6


def test_dropout_eval_is_identity_train_scales():
    x = Tensor(np.ones((100, 10)), requires_grad=True)
    assert T.dropout(x, 0.5, train=False, rng=None) is x
    out = T.dropout(x, 0.5, train=True, rng=np.random.default_rng(0))
    vals = np.unique(out.data)
    assert set(vals.tolist()) <= {0.0, 2.0}
    out2 = T.dropout(x, 0.5, train=True, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, out2.data)


def test_forward_determinism():
    rng = np.random.default_rng(27)
    a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def run():
        a.zero_grad()
        out = T.softmax(T.gelu(a @ a), axis=-1).sum()
        out.backward()
        return out.data.copy(), a.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(g1, g2)
