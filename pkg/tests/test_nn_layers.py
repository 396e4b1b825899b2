import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svsec import tensor_core as tc
from svsec.nn_layers import Conv2dLayer, LinearLayer, conv2d, global_avg_pool, init_params, linear, maxpool2d
from svsec.tensor_core import Rng, ShapeError, Tape, Tensor, backward, grad_check, precision

from oracles import conv2d_loops, maxpool_scan


def conv_layer(w, b, stride=1, padding=0):
    return Conv2dLayer(Tensor(np.asarray(w, np.float32)), Tensor(np.asarray(b, np.float32)), stride, padding)


def test_conv_scaling_kernel():
    x = np.random.default_rng(0).random((1, 1, 5, 5)).astype(np.float32)
    out = conv2d(Tensor(x), conv_layer([[[[2.0]]]], [0.0]))
    assert np.array_equal(out.data, 2 * x)


def test_conv_hand_example():
    out = conv2d(tc.tensor([[[[1, 2], [3, 4]]]]), conv_layer([[[[1, 0], [0, 1]]]], [0.0]))
    assert out.data.tolist() == [[[[5.0]]]]


def test_conv_random_vs_loops():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(Tensor(x), conv_layer(w, b, 1, 1)).data
    assert np.max(np.abs(got - conv2d_loops(x, w, b, 1, 1))) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), B=st.integers(1, 2), C=st.integers(1, 3), F=st.integers(1, 3),
       H=st.integers(3, 8), W=st.integers(3, 8), k=st.sampled_from([1, 2, 3]), stride=st.sampled_from([1, 2]),
       pad=st.integers(0, 1))
def test_conv_matches_loops_property(seed, B, C, F, H, W, k, stride, pad):
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, H, W)).astype(np.float32)
    w = rng.standard_normal((F, C, k, k)).astype(np.float32)
    b = rng.standard_normal(F).astype(np.float32)
    got = conv2d(Tensor(x), conv_layer(w, b, stride, pad)).data
    assert np.max(np.abs(got - conv2d_loops(x, w, b, stride, pad))) <= 1e-5


def test_conv_shape_errors():
    layer = conv_layer(np.zeros((2, 3, 3, 3)), np.zeros(2), stride=2, padding=0)
    with pytest.raises(ShapeError):
        conv2d(tc.zeros([1, 2, 7, 7]), layer)  # channel mismatch
    with pytest.raises(ShapeError):
        conv2d(tc.zeros([1, 3, 6, 6]), layer)  # (6-3)/2 not integral


def test_conv_gradients():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        for seed in range(3):
            r = np.random.default_rng(seed)
            layer = Conv2dLayer(Tensor(r.normal(size=(3, 2, 3, 3))), Tensor(r.normal(size=3)), 2, 1)
            x = Tensor(r.normal(size=(2, 2, 5, 5)))
            target = Tensor(rng.normal(size=(2, 3, 3, 3)))

            def f_x(v):
                return tc.tsum(tc.mul(conv2d(v, layer), target))

            assert grad_check(f_x, x, h=1e-3, tol=1e-3).passed

            def f_params():
                return tc.tsum(tc.mul(conv2d(x, layer), target))

            assert grad_check(f_params, [layer.weight, layer.bias], h=1e-3, tol=1e-3).passed


def test_maxpool_examples():
    assert maxpool2d(tc.tensor([[[[1, 2], [3, 4]]]])).data.tolist() == [[[[4.0]]]]
    const = maxpool2d(tc.constant([1, 2, 6, 6], 0.7)).data
    assert const.shape == (1, 2, 3, 3) and np.all(const == np.float32(0.7))


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_vs_window_scan(seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 6, 6)).astype(np.float32)
    assert np.array_equal(maxpool2d(Tensor(x)).data, maxpool_scan(x).astype(np.float32))


def test_maxpool_odd_extent_pads_bottom_right():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    assert maxpool2d(Tensor(x)).data[0, 0].tolist() == [[5, 6], [8, 9]]


def test_maxpool_backward_routes_to_first_max_and_conserves_sum():
    x = tc.tensor([[[[1.0, 1.0], [1.0, 1.0]]]], requires_grad=True)
    with Tape() as tape:
        loss = tc.tsum(tc.scale(maxpool2d(x), 3.0))
    backward(loss, tape)
    assert x.grad.tolist() == [[[[3.0, 0.0], [0.0, 0.0]]]]

    v = np.random.default_rng(0).standard_normal((2, 3, 6, 6)).astype(np.float32)
    up = np.random.default_rng(1).standard_normal((2, 3, 3, 3))
    x = Tensor(v, requires_grad=True)
    with Tape() as tape:
        loss = tc.tsum(tc.mul(maxpool2d(x), Tensor(up.astype(np.float32))))
    backward(loss, tape)
    assert np.isclose(x.grad.astype(np.float64).sum(), up.astype(np.float32).astype(np.float64).sum(), atol=1e-5)


def test_maxpool_gradcheck_off_ties():
    with precision(np.float64):
        for seed in range(5):
            x = Tensor(np.random.default_rng(seed).permutation(72).reshape(2, 1, 6, 6) / 10.0)
            rep = grad_check(lambda v: tc.tsum(tc.mul(maxpool2d(v), maxpool2d(v))), x, h=1e-3, tol=1e-3)
            assert rep.passed


def test_linear_examples():
    x = tc.tensor([[1.0, 1.0]])
    assert linear(x, LinearLayer(tc.tensor(np.eye(2)), tc.zeros([2]))).data.tolist() == [[1.0, 1.0]]
    assert linear(x, LinearLayer(tc.tensor([[1, 2], [3, 4]]), tc.zeros([2]))).data.tolist() == [[3.0, 7.0]]


def test_linear_vs_matmul():
    rng = np.random.default_rng(3)
    x, w, b = rng.random((4, 6)), rng.random((5, 6)), rng.random(5)
    got = linear(tc.tensor(x), LinearLayer(tc.tensor(w), tc.tensor(b))).data
    ref = tc.matmul(tc.tensor(x), tc.tensor(w.T)).data + b.astype(np.float32)
    assert np.max(np.abs(got - ref)) <= 1e-5
    with pytest.raises(ShapeError):
        linear(tc.zeros([2, 3]), LinearLayer(tc.tensor(w), tc.tensor(b)))


def test_global_avg_pool():
    assert np.all(global_avg_pool(tc.constant([2, 3, 4, 5], 1.25)).data == 1.25)
    assert global_avg_pool(tc.tensor([[[[1, 2], [3, 4]]]])).data.tolist() == [[2.5]]
    x = np.random.default_rng(0).random((2, 3, 5, 7)).astype(np.float32)
    got = global_avg_pool(Tensor(x)).data
    ref = np.array([[float(np.mean(x[b, c].astype(np.float64))) for c in range(3)] for b in range(2)])
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_init_biases_zero_and_he_std():
    layer = Conv2dLayer.create(3, 16)
    layer.bias.data[...] = 5.0
    init_params(layer, Rng(0), "he")
    assert np.all(layer.bias.data == 0.0)
    assert layer.weight.data.size >= 400
    draws = np.concatenate([init_params(Conv2dLayer.create(3, 16), Rng(s), "he").weight.data.ravel()
                            for s in range(3)])
    assert len(draws) >= 1000
    assert abs(draws.std() / np.sqrt(2 / 27) - 1.0) <= 0.2


def test_init_same_seed_bit_identical():
    a = init_params(LinearLayer.create(10, 4), Rng(9), "xavier").weight.data
    b = init_params(LinearLayer.create(10, 4), Rng(9), "xavier").weight.data
    assert a.tobytes() == b.tobytes()
    assert np.all(np.abs(a) <= np.sqrt(6 / 14))
