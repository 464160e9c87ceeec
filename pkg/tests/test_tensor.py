import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dasnet.gradcheck import check_gradients
from dasnet.tensor import (ParamStore, ShapeError, Tensor, backward, concat_channels, channel_slice, conv2d,
                           mul, relu, scale, sgd_momentum_step, sigmoid, softmax_over_channels, sum_all,
                           transposed_conv2d)


def randt(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=grad)


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    k = Tensor(np.eye(3, dtype=np.float32)[:, :, None, None])
    assert np.array_equal(conv2d(x, k).data, x.data)


def test_conv_output_shape():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    assert conv2d(x, Tensor(np.zeros((16, 3, 3, 3))), stride=2, pad=1).shape == (1, 16, 4, 4)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))))
    assert "(1, 2, 8, 8)" in str(err.value) and "(4, 3, 3, 3)" in str(err.value)


def test_conv_rejects_bad_geometry():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_conv_gradcheck(stride, pad):
    rng = np.random.default_rng(2)
    x, k = randt(rng, 1, 2, 5, 5), randt(rng, 3, 2, 3, 3)
    r = rng.standard_normal((1, 3) + conv2d(x, k, stride, pad).shape[2:])
    errs = check_gradients(lambda: sum_all(mul(conv2d(x, k, stride, pad), Tensor(r))), [x, k])
    assert max(errs.values()) < 1e-3


def test_transposed_conv_shape():
    x = Tensor(np.zeros((1, 16, 4, 4)))
    assert transposed_conv2d(x, Tensor(np.zeros((16, 8, 4, 4))), stride=2, pad=1).shape == (1, 8, 8, 8)


def test_transposed_conv_is_conv_input_gradient():
    rng = np.random.default_rng(3)
    k = rng.standard_normal((4, 3, 4, 4)).astype(np.float32)
    x = randt(rng, 2, 3, 8, 8)
    y = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    backward(sum_all(mul(conv2d(x, Tensor(k), 2, 1), Tensor(y))))
    # conv kernel O×I×K×K is the transposed conv's Cin×Cout×K×K
    np.testing.assert_allclose(transposed_conv2d(Tensor(y), Tensor(k), 2, 1).data, x.grad, rtol=1e-5, atol=1e-5)


def test_transposed_conv_gradcheck():
    rng = np.random.default_rng(4)
    x, k = randt(rng, 1, 2, 3, 3), randt(rng, 2, 3, 4, 4)
    r = rng.standard_normal((1, 3, 6, 6))
    errs = check_gradients(lambda: sum_all(mul(transposed_conv2d(x, k, 2, 1), Tensor(r))), [x, k])
    assert max(errs.values()) < 1e-3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), stride=st.integers(1, 3), pad=st.integers(0, 2), k=st.integers(1, 4),
       h=st.integers(4, 9))
def test_adjoint_identity(seed, stride, pad, k, h):
    # matched geometry: the transposed conv maps back onto exactly h×h
    assume(k <= h + 2 * pad and (h + 2 * pad - k) % stride == 0)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, h, h)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    cx = conv2d(Tensor(x), Tensor(w), stride, pad).data
    y = rng.standard_normal(cx.shape).astype(np.float32)
    ty = transposed_conv2d(Tensor(y), Tensor(w), stride, pad).data
    assert ty.shape == x.shape
    lhs = float(np.sum(cx.astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * ty))
    norm = np.linalg.norm(cx) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(ty)
    assert abs(lhs - rhs) < 1e-4 * max(norm, 1.0)


def test_relu_values():
    assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]


def test_concat_and_slice_roundtrip():
    rng = np.random.default_rng(5)
    a, b = randt(rng, 2, 8, 3, 3), randt(rng, 2, 4, 3, 3)
    c = concat_channels(a, b)
    assert c.shape == (2, 12, 3, 3)
    assert np.array_equal(channel_slice(c, 0, 8).data, a.data)
    assert np.array_equal(channel_slice(c, 8, 12).data, b.data)
    with pytest.raises(ShapeError):
        concat_channels(a, randt(rng, 2, 4, 2, 3))


def test_softmax_of_zeros_is_half():
    assert np.all(softmax_over_channels(Tensor(np.zeros((1, 2, 3, 3)))).data == 0.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.integers(2, 6), spread=st.floats(0.1, 30.0))
def test_softmax_sums_to_one(seed, c, spread):
    x = np.random.default_rng(seed).standard_normal((2, c, 3, 4)) * spread
    s = softmax_over_channels(Tensor(x)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.abs(s.astype(np.float64).sum(axis=1) - 1).max() < 1e-5


def test_elementwise_gradchecks():
    rng = np.random.default_rng(6)
    x = randt(rng, 2, 3, 4, 4)
    r = Tensor(rng.standard_normal((2, 3, 4, 4)))
    for f in (sigmoid, lambda t: scale(t, -2.5), softmax_over_channels):
        errs = check_gradients(lambda: sum_all(mul(f(x), r)), [x])
        assert errs[0] < 1e-3


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3), np.float32))


def test_backward_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(sum_all(mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_backward_is_deterministic():
    def grads():
        rng = np.random.default_rng(7)
        x, k = randt(rng, 2, 3, 6, 6), randt(rng, 4, 3, 3, 3)
        y = relu(conv2d(x, k, 1, 1))
        backward(sum_all(mul(y, concat_channels(channel_slice(y, 2, 4), channel_slice(y, 0, 2)))))
        return x.grad.tobytes() + k.grad.tobytes()
    assert grads() == grads()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = mul(x, x)
    backward(sum_all(mul(y, y)))  # x^4
    assert x.grad.tolist() == [108.0]


def _store(value=1.0):
    s = ParamStore()
    s.add("b.w", np.full(3, value))
    s.add("a.w", np.full(2, value))
    return s


def test_paramstore_sorted_and_duplicate():
    s = _store()
    assert s.names() == ["a.w", "b.w"]
    with pytest.raises(KeyError):
        s.add("a.w", np.zeros(1))


def test_sgd_plain_and_zero_lr():
    s = _store(1.0)
    for _, t in s.items():
        t.grad = np.full(t.shape, 2.0, np.float32)
    sgd_momentum_step(s, 0.1, 0.0)
    assert np.allclose(s["a.w"].data, 0.8) and s["a.w"].grad is None
    for _, t in s.items():
        t.grad = np.full(t.shape, 5.0, np.float32)
    before = s["b.w"].data.copy()
    sgd_momentum_step(s, 0.0, 0.9)
    assert np.array_equal(s["b.w"].data, before)


def test_sgd_two_momentum_steps_closed_form():
    s = _store(0.0)
    g, lr = 1.5, 0.01
    for _ in range(2):
        for _, t in s.items():
            t.grad = np.full(t.shape, g, np.float32)
        sgd_momentum_step(s, lr, 0.9)
    np.testing.assert_allclose(s["a.w"].data, -lr * (g + 1.9 * g), rtol=1e-6)


def test_sgd_missing_grad_and_bad_args():
    s = _store()
    s["a.w"].grad = np.ones(2, np.float32)
    with pytest.raises(ValueError, match="b.w"):
        sgd_momentum_step(s, 0.1, 0.9)
    with pytest.raises(ValueError):
        sgd_momentum_step(s, -1.0, 0.9)
    with pytest.raises(ValueError):
        sgd_momentum_step(s, 0.1, 1.0)


def test_frozen_params_untouched():
    s = _store(1.0)
    s.freeze("a.")
    s["b.w"].grad = np.ones(3, np.float32)
    before = s["a.w"].data.tobytes()
    sgd_momentum_step(s, 0.5, 0.9)
    assert s["a.w"].data.tobytes() == before
    assert not s["a.w"].requires_grad
