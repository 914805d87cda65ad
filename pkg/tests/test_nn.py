import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcasim import crossbar as cb
from mcasim import device as dev
from mcasim import nn

ELEMENTWISE = ("sigmoid", "tanh", "relu", "identity")


def test_activation_values():
    assert nn.activation("sigmoid", [0.0])[0] == 0.5
    assert nn.activation("tanh", [0.0])[0] == 0.0
    assert nn.activation("relu", [-1.0])[0] == 0.0
    assert np.allclose(nn.activation("softmax", np.full(10, 3.3)), 0.1, rtol=1e-15)
    assert nn.activation("maxout-5", np.arange(10.0)).tolist() == [4.0, 9.0]


def test_activation_errors():
    with pytest.raises(nn.NNError):
        nn.activation("sigmoid", [np.nan])
    with pytest.raises(nn.NNError):
        nn.activation("maxout-5", np.ones(7))
    with pytest.raises(nn.NNError):
        nn.activation("softplus", [1.0])
    with pytest.raises(nn.NNError):
        nn.activation("softmax", np.zeros(0))


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "relu"])
def test_elementwise_derivatives_finite_difference(name):
    v = np.random.default_rng(0).uniform(-4, 4, 100)
    if name == "relu":
        v = v[np.abs(v) > 1e-3]
    h = 1e-6
    fd = (nn.activation(name, v + h) - nn.activation(name, v - h)) / (2 * h)
    assert np.max(np.abs(nn.derivative(name, v) - fd)) <= 1e-6


def test_softmax_jacobian_finite_difference():
    g = np.random.default_rng(1)
    h = 1e-6
    for _ in range(100):
        v = g.normal(size=6)
        J = nn.derivative("softmax", v)
        fd = np.stack([(nn.softmax(v + h * e) - nn.softmax(v - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        assert np.max(np.abs(J - fd)) <= 1e-6


def test_maxout_derivative_routes_to_winner():
    v = np.array([0.0, 3.0, 1.0, 2.0, -1.0, 5.0, 5.0, 0.0, 0.0, 0.0])
    up = np.array([2.0, 7.0])
    g = nn.backprop_activation("maxout-5", v, up)
    assert g.tolist() == [0, 2.0, 0, 0, 0, 7.0, 0, 0, 0, 0]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
def test_softmax_sums_to_one(v):
    assert abs(nn.softmax(v).sum() - 1.0) <= 1e-12


def test_loss_values():
    y = np.array([0.2, 0.7, 0.1])
    value, grad = nn.loss("mse", y, y)
    assert value == 0.0 and not grad.any()
    t = np.zeros(50)
    t[17] = 1.0
    assert nn.loss("cross-entropy", np.full(50, 1 / 50), t)[0] == pytest.approx(math.log(50))
    value, _ = nn.loss("gan-generator", np.full(8, 0.5), None)
    assert value / 8 == pytest.approx(math.log(2))  # minimized negation of sum log D = -8 ln 1/2


def test_gan_losses_gradients():
    g = np.random.default_rng(2)
    p = g.uniform(0.05, 0.95, 6)
    t = (g.random(6) < 0.5).astype(float)
    h = 1e-7
    for name, tt in (("gan-generator", None), ("gan-discriminator", t), ("cross-entropy", t), ("mse", t)):
        _, grad = nn.loss(name, p, tt)
        fd = np.array([(nn.loss(name, p + h * e, tt)[0] - nn.loss(name, p - h * e, tt)[0]) / (2 * h)
                       for e in np.eye(6)])
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-6), name


def test_loss_reports_offending_index():
    with pytest.raises(nn.NNError, match="index 2"):
        nn.loss("gan-generator", [0.5, 0.4, 0.0], None)
    with pytest.raises(nn.NNError, match="index 1"):
        nn.loss("cross-entropy", [0.5, 0.0], [0.0, 1.0])
    with pytest.raises(nn.NNError):
        nn.loss("mse", [1.0, 2.0], [1.0])


def test_softmax_cross_entropy_fused():
    z = np.array([1.0, -2.0, 0.5])
    t = np.array([0.0, 0.0, 1.0])
    v, g = nn.softmax_cross_entropy(z, t)
    assert v == pytest.approx(-math.log(nn.softmax(z)[2]))
    assert np.allclose(g, nn.softmax(z) - t)


# -- convolution ----------------------------------------------------------------


def brute_conv(img, filt):
    n, _, d = img.shape
    k, _, _, m = filt.shape
    h = k // 2
    out = np.zeros((m, n * n))
    for f in range(m):
        for r in range(n):
            for s in range(n):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        rr, ss = r + a - h, s + b - h
                        if 0 <= rr < n and 0 <= ss < n:
                            acc += img[rr, ss, :] @ filt[a, b, :, f]
                out[f, r * n + s] = acc
    return out


def test_im2col_1x1():
    img = np.random.default_rng(0).normal(size=(5, 5))
    p = nn.im2col(img, 1)
    assert np.array_equal(p[0], img.ravel())
    assert np.allclose(nn.conv_as_matmul(np.array([[2.5]]), p), 2.5 * img.ravel())


def test_im2col_dimensions():
    p = nn.im2col(np.zeros((4, 4, 3)), 3)
    assert p.shape == (27, 16)
    assert nn.filters_to_matrix(np.zeros((3, 3, 3, 8))).shape == (27, 8)


def test_im2col_matches_brute_force():
    g = np.random.default_rng(3)
    for _ in range(100):
        n, d, k, m = g.integers(1, 7), g.integers(1, 4), g.choice([1, 3, 5]), g.integers(1, 5)
        img = g.normal(size=(n, n, d))
        filt = g.normal(size=(k, k, d, m))
        out = nn.conv_as_matmul(nn.filters_to_matrix(filt), nn.im2col(img, k))
        assert np.allclose(out, brute_conv(img, filt), rtol=0, atol=1e-10)


def test_conv_on_crossbar_matches_dense():
    import dataclasses

    model = dataclasses.replace(dev.DeviceModelParams(), read_noise_frac=0.0, nu_mean=0.0, nu_std=0.0)
    a, _ = cb.init_array(27, 4, "differential", 1.6, 0.83, model, seed=0, dac_bits=None, adc_bits=None)
    patches = nn.im2col(np.random.default_rng(0).normal(size=(4, 4, 3)), 3)
    assert np.allclose(nn.conv_as_matmul(a, patches), a.cached_weights().T @ patches, rtol=1e-12, atol=1e-12)


def test_conv_weight_update_is_average_of_outer_products():
    g = np.random.default_rng(4)
    p, dl = g.normal(size=(9, 16)), g.normal(size=(2, 16))
    ref = sum(np.outer(p[:, q], dl[:, q]) for q in range(16)) * 0.1 / 16
    assert np.allclose(nn.conv_weight_update(p, dl, 0.1), ref)


def test_im2col_errors():
    with pytest.raises(nn.NNError):
        nn.im2col(np.zeros((4, 4)), 2)
    with pytest.raises(nn.NNError):
        nn.im2col(np.zeros((4, 5)), 3)
    with pytest.raises(nn.NNError):
        nn.conv_as_matmul(np.zeros((5, 2)), np.zeros((9, 4)))


# -- LSTM -------------------------------------------------------------------------


def reference_lstm(W, b, x, h, c):
    n = h.size
    out = []
    for r in range(4 * n):
        s = b[r]
        for q, u in enumerate(list(x) + list(h)):
            s += W[r, q] * u
        out.append(s)
    z = np.array(out)
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:n]), sig(z[n:2 * n]), sig(z[2 * n:3 * n]), np.tanh(z[3 * n:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_lstm_zero_parameters():
    n, m = 3, 2
    p = nn.LstmCellParams(np.zeros((4 * n, m + n)), np.zeros(4 * n), n, m)
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = nn.lstm_cell(p, np.ones(m), np.ones(n), c_prev)
    assert np.allclose(c, 0.5 * c_prev) and np.allclose(h, 0.5 * np.tanh(0.5 * c_prev))


def test_lstm_forget_path_annihilated():
    g = np.random.default_rng(5)
    n, m = 4, 3
    p = nn.LstmCellParams(g.normal(size=(4 * n, m + n)), g.normal(size=4 * n), n, m)
    x, h0 = g.normal(size=m), g.normal(size=n)
    _, c = nn.lstm_cell(p, x, h0, np.zeros(n))
    z = p.W @ np.concatenate([x, h0]) + p.b
    assert np.allclose(c, nn.sigmoid(z[:n]) * np.tanh(z[3 * n:]))


def test_lstm_matches_reference_implementation():
    g = np.random.default_rng(6)
    for _ in range(100):
        n, m = g.integers(1, 6), g.integers(1, 6)
        W, b = g.normal(size=(4 * n, m + n)), g.normal(size=4 * n)
        x, h, c = g.normal(size=m), g.normal(size=n), g.normal(size=n)
        h1, c1 = nn.lstm_cell(nn.LstmCellParams(W, b, n, m), x, h, c)
        h2, c2 = reference_lstm(W, b, x, h, c)
        assert np.allclose(h1, h2, rtol=1e-12, atol=1e-12) and np.allclose(c1, c2, rtol=1e-12, atol=1e-12)


def test_lstm_input_permutation_invariance():
    g = np.random.default_rng(7)
    n, m = 3, 4
    W, b = g.normal(size=(4 * n, m + n)), g.normal(size=4 * n)
    x, h, c = g.normal(size=m), g.normal(size=n), g.normal(size=n)
    perm = g.permutation(m)
    cols = np.concatenate([perm, m + np.arange(n)])
    a = nn.lstm_cell(nn.LstmCellParams(W, b, n, m), x, h, c)
    b2 = nn.lstm_cell(nn.LstmCellParams(W[:, cols], b, n, m), x[perm], h, c)
    assert np.allclose(a[0], b2[0], rtol=1e-13) and np.allclose(a[1], b2[1], rtol=1e-13)


def test_lstm_on_exact_backend():
    g = np.random.default_rng(8)
    n, m = 2, 3
    p = nn.LstmCellParams(g.normal(size=(4 * n, m + n)), g.normal(size=4 * n), n, m)
    args = g.normal(size=m), g.normal(size=n), g.normal(size=n)
    a = nn.lstm_cell(p, *args)
    b = nn.lstm_cell(p, *args, backend=nn.ExactWeights(p.W.T))
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])
    with pytest.raises(nn.NNError):
        nn.LstmCellParams(np.zeros((3, 3)), np.zeros(8), 2, 1)


# -- dense chains --------------------------------------------------------------------


def make_net(sizes, acts, seed=0):
    g = np.random.default_rng(seed)
    return [nn.DenseLayer(nn.ExactWeights(g.normal(scale=0.7, size=(a + 1, b))), act)
            for a, b, act in zip(sizes[:-1], sizes[1:], acts)]


def net_loss(layers, x, t, loss_name):
    return nn.mlp_forward_backward(layers, x, t, loss_name, backward=False).loss


@pytest.mark.parametrize("acts,loss_name", [(("sigmoid", "sigmoid"), "mse"),
                                            (("tanh", "softmax"), "cross-entropy"),
                                            (("relu", "softmax"), "mse")])
def test_gradient_matches_finite_differences(acts, loss_name):
    layers = make_net([6, 4, 3], acts)
    g = np.random.default_rng(9)
    x = g.normal(size=6)
    t = np.eye(3)[1]
    fb = nn.mlp_forward_backward(layers, x, t, loss_name)
    h = 1e-6
    for k, layer in enumerate(layers):
        analytic = -np.outer(fb.xs[k], fb.deltas[k])
        W = layer.backend.W
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            old = W[idx]
            W[idx] = old + h
            up = net_loss(layers, x, t, loss_name)
            W[idx] = old - h
            down = net_loss(layers, x, t, loss_name)
            W[idx] = old
            fd[idx] = (up - down) / (2 * h)
        err = np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12)
        assert err <= 1e-5


def test_zero_input_zero_weights():
    layers = [nn.DenseLayer(nn.ExactWeights(np.zeros((5, 3))), "relu"),
              nn.DenseLayer(nn.ExactWeights(np.zeros((4, 2))), "tanh")]
    fb = nn.mlp_forward_backward(layers, np.zeros(4), np.zeros(2))
    assert not fb.xs[1][:-1].any() and fb.xs[1][-1] == 1.0
    assert not fb.output.any()


def test_chain_shape_errors():
    layers = make_net([6, 4, 3], ("sigmoid", "sigmoid"))
    with pytest.raises(nn.NNError):
        nn.mlp_forward_backward(layers, np.zeros(5), np.zeros(3))


def test_experiment_topology_weight_count():
    assert nn.count_weights([784, 250, 10]) == 198_760
