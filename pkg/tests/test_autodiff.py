import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpgat import autodiff as ad
from mpgat import kernels
from mpgat.autodiff import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def finite(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False))


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_small_product():
    out = ad.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2)), ((4, 3), (2, 3, 5))])
def test_matmul_gradient(shape_a, shape_b):
    rng = np.random.default_rng(0)
    a = rng.normal(size=shape_a)
    b = rng.normal(size=shape_b)
    assert ad.gradient_check(lambda t: ad.sum_(ad.matmul(t, b)), a.copy()) < 1e-6
    assert ad.gradient_check(lambda t: ad.sum_(ad.matmul(a, t)), b.copy()) < 1e-6


def test_matmul_rejects_vectors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones(3), np.ones((3, 1)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# --- softmax / leaky relu --------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_lastdim(np.zeros(2)).data, [0.5, 0.5])
    out = ad.softmax_lastdim(np.array([5.0, ad.MASK_FILL])).data
    assert out[0] == 1.0 and out[1] == 0.0
    np.testing.assert_allclose(ad.softmax_lastdim(np.array([1.0, 2, 3])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(finite((4, 5)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_lastdim(x).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_softmax_gradient_check():
    x = np.random.default_rng(1).normal(size=(3, 4))
    w = np.random.default_rng(2).normal(size=(3, 4))
    assert ad.gradient_check(lambda t: ad.sum_(ad.softmax_lastdim(t) * w), x) < 1e-6


def test_softmax_sum_has_zero_gradient():
    x = leaf(np.random.default_rng(3).normal(size=(2, 5)))
    ad.backward(ad.sum_(ad.softmax_lastdim(x)))
    assert np.max(np.abs(x.grad)) < 1e-12
    assert ad.gradient_check(lambda t: ad.sum_(ad.softmax_lastdim(t)), x.data.copy()) < 1e-4


def test_leaky_relu_values_and_gradient():
    assert ad.leaky_relu(np.array(3.0), 0.2).item() == 3.0
    assert ad.leaky_relu(np.array(-2.0), 0.2).item() == pytest.approx(-0.4)
    x = leaf([-2.0])
    ad.backward(ad.sum_(ad.leaky_relu(x, 0.2)))
    assert x.grad[0] == pytest.approx(0.2)


def test_leaky_relu_slope_range():
    with pytest.raises(ValueError):
        ad.leaky_relu(np.ones(2), 1.5)


# --- causal convolution ----------------------------------------------------


def conv1(x, w, dilation):
    x = np.asarray(x, float).reshape(1, 1, -1)
    w = np.asarray(w, float).reshape(1, 1, -1)
    return ad.dilated_causal_conv1d(x, w, dilation).data.ravel()


def test_conv_examples():
    np.testing.assert_array_equal(conv1([1, 2, 3, 4], [1, 1], 1), [1, 3, 5, 7])
    np.testing.assert_array_equal(conv1([1, 2, 3, 4], [1, 1], 2), [1, 2, 4, 6])


@given(finite((7,)), st.integers(1, 4))
def test_conv_identity_kernel(x, dilation):
    np.testing.assert_array_equal(conv1(x, [1, 0], dilation), x)


def test_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.dilated_causal_conv1d(np.ones((2, 3, 5)), np.ones((4, 2, 2)), 1)


def test_conv_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6))
    w = rng.normal(size=(4, 3, 2))
    r = rng.normal(size=(2, 4, 6))
    assert ad.gradient_check(lambda t: ad.sum_(ad.dilated_causal_conv1d(t, w, 2) * r), x.copy()) < 1e-6
    assert ad.gradient_check(lambda t: ad.sum_(ad.dilated_causal_conv1d(x, t, 2) * r), w.copy()) < 1e-6


@pytest.mark.parametrize("dilation", [1, 2, 3, 9])
def test_conv_kernels_agree(dilation):
    rng = np.random.default_rng(dilation)
    x = rng.normal(size=(5, 4, 11))
    w = rng.normal(size=(3, 4, 2))
    g = rng.normal(size=(5, 3, 11))
    np.testing.assert_allclose(kernels.causal_conv_forward_loop(x, w, dilation),
                               kernels.causal_conv_forward_numpy(x, w, dilation), atol=1e-12)
    for a, b in zip(kernels.causal_conv_backward_loop(g, x, w, dilation),
                    kernels.causal_conv_backward_numpy(g, x, w, dilation)):
        np.testing.assert_allclose(a, b, atol=1e-12)


# --- concat / masked fill --------------------------------------------------


def test_concat_examples():
    np.testing.assert_array_equal(ad.concat([np.array([1.0]), np.array([2.0])], 0).data, [1, 2])
    v = np.ones((3, 4))
    assert ad.concat([v, v, v], axis=-1).shape == (3, 12)


def test_concat_splits_gradient_by_offsets():
    a, b = leaf(np.zeros((2, 1))), leaf(np.zeros((2, 3)))
    weights = np.arange(8.0).reshape(2, 4)
    ad.backward(ad.sum_(ad.concat([a, b], axis=1) * weights))
    np.testing.assert_array_equal(a.grad, weights[:, :1])
    np.testing.assert_array_equal(b.grad, weights[:, 1:])


def test_concat_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.concat([np.ones((2, 2)), np.ones((3, 2))], axis=1)


def test_masked_fill():
    out = ad.masked_fill(np.array([1.0, 2.0]), np.array([False, True]), -9e15)
    np.testing.assert_array_equal(out.data, [1, -9e15])
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(ad.masked_fill(x, np.zeros(2, bool)).data, x)
    t = leaf([1.0, 2.0])
    ad.backward(ad.sum_(ad.masked_fill(t, np.array([False, True])) * 3.0))
    np.testing.assert_array_equal(t.grad, [3.0, 0.0])


# --- backward / tape --------------------------------------------------------


@given(finite((2, 3)))
def test_sum_gradient_is_ones(x):
    t = leaf(x)
    ad.backward(ad.sum_(t))
    np.testing.assert_array_equal(t.grad, np.ones_like(x))


def test_square_gradient():
    t = leaf([1.0, -3.0])
    ad.backward(ad.sum_(ad.square(t)))
    np.testing.assert_array_equal(t.grad, [2, -6])


def test_non_scalar_loss_rejected():
    with pytest.raises(ad.GradientError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_loss_without_parameters_rejected():
    with pytest.raises(ad.GradientError):
        ad.backward(ad.sum_(Tensor(np.ones(2))))


def test_tape_replay_matches_topological_order():
    x = np.random.default_rng(5).normal(size=(3, 3))

    def loss(t):
        h = ad.tanh(ad.matmul(t, t))
        return ad.sum_(h * h + ad.sigmoid(t))

    a = leaf(x)
    ad.backward(loss(a))
    b = leaf(x)
    with ad.Tape() as tape:
        out = loss(b)
    assert len(tape) > 0
    ad.backward(out, tape=tape)
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-14)


def test_shared_subexpression_accumulates():
    t = leaf([2.0])
    y = t * t
    ad.backward(ad.sum_(y + y))
    assert t.grad[0] == pytest.approx(8.0)


def test_no_grad_builds_no_graph():
    t = leaf([1.0])
    with ad.no_grad():
        y = t * 3.0
    assert not y.requires_grad


def test_broadcast_gradient_unbroadcasts():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    ad.backward(ad.sum_(a * b))
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, 3.0)


def test_einsum_gradient():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(5, 4))
    assert ad.gradient_check(lambda t: ad.sum_(ad.square(ad.einsum("ntd,cd->nct", t, b))), a.copy()) < 1e-6


def test_getitem_gradient():
    a = leaf(np.arange(12.0).reshape(3, 4))
    ad.backward(ad.sum_(a[..., -1]) + ad.sum_(a[[0, 0], 1]))
    expect = np.zeros((3, 4))
    expect[:, -1] = 1
    expect[0, 1] = 2
    np.testing.assert_array_equal(a.grad, expect)


# --- gradient_check ------------------------------------------------------


def test_gradient_check_quadratic():
    assert ad.gradient_check(lambda t: ad.sum_(ad.square(t)), np.array([1.0, 2.0, 3.0]), h=1e-5) < 1e-8


def test_gradient_check_detects_wrong_gradient():
    def broken(t):
        # forward of t**3, backward of 2t
        out = t.data**3
        return ad.sum_(ad._node(out, (t,), lambda g: (2 * t.data * g,), "broken"))

    assert ad.gradient_check(broken, np.array([1.5, -2.0])) > 0.1


def test_composite_pipeline_gradient():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(4, 4))

    def f(t):
        s = ad.leaky_relu(ad.matmul(t, w), 0.2)
        return ad.mean(ad.abs_(ad.softmax_lastdim(s) - 0.1) * ad.exp(ad.tanh(t)))

    assert ad.gradient_check(f, rng.normal(size=(3, 4))) < 1e-5


# --- adam / clipping -------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    p = leaf([1.0, -1.0, 2.0])
    opt = ad.Adam({"p": p}, lr=0.01)
    p.grad = np.array([0.3, -5.0, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -1.0 + 0.01, 2.0 - 0.01], atol=1e-7)


def test_adam_zero_gradient_keeps_parameter():
    p = leaf([0.7])
    opt = ad.Adam({"p": p})
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 0.7


def test_adam_converges_on_quadratic():
    x = leaf([1.0])
    opt = ad.Adam({"x": x}, lr=0.1)
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = ad.sum_(ad.square(x))
        losses.append(loss.item())
        ad.backward(loss)
        opt.step()
    assert abs(x.data[0]) < 0.05
    assert losses[-1] < losses[0]


def test_adam_requires_gradient():
    opt = ad.Adam({"p": leaf([1.0])})
    with pytest.raises(ad.GradientError, match="'p'"):
        opt.step()


def test_clip_grad_norm():
    a, b = leaf([0.0]), leaf([0.0, 0.0])
    a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
    assert ad.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.sqrt(a.grad[0] ** 2 + np.sum(b.grad**2)) == pytest.approx(1.0)


# --- checkpoint ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    params = {"w": leaf(rng.normal(size=(3, 2))), "b": leaf(rng.normal(size=4))}
    path = tmp_path / "ck.json"
    ad.save_params(path, params, {"note": "x"})
    loaded, header = ad.load_params(path)
    assert header == {"note": "x"}
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ValueError):
        ad.load_params(path)


@settings(max_examples=30)
@given(finite((3, 5)))
def test_sigmoid_tanh_ranges(x):
    s = ad.sigmoid(x).data
    t = ad.tanh(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(np.abs(t) <= 1)
