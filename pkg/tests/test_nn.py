import math

import numpy as np
import pytest

from bevhead import nn

from oracles import central_difference, rel_error

TOL = 1e-4


def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def naive_conv(x, w, b):
    Cin, H, W = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    y = np.zeros((w.shape[0], H, W))
    for o in range(w.shape[0]):
        for i in range(H):
            for j in range(W):
                y[o, i, j] = np.sum(p[:, i : i + 3, j : j + 3] * w[o]) + b[o]
    return y


@pytest.mark.parametrize("cin, cout", [(3, 5), (5, 2), (4, 4)])
def test_conv_matches_naive(cin, cout):
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(cin, 5, 6)), rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout)
    y, _ = nn.conv3x3_forward(x, w, b)
    assert np.allclose(y, naive_conv(x, w, b), atol=1e-12)


def test_conv_rejects_bad_kernel():
    with pytest.raises(ValueError):
        nn.conv3x3_forward(np.zeros((3, 4, 4)), np.zeros((2, 4, 3, 3)), np.zeros(2))


@pytest.mark.parametrize("cin, cout", [(3, 5), (5, 2)])
def test_conv_gradients(cin, cout):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(cin, 4, 4)), rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout)
    up = rng.normal(size=(cout, 4, 4))

    def f():
        return float(np.sum(nn.conv3x3_forward(x, w, b)[0] * up))

    _, cache = nn.conv3x3_forward(x, w, b)
    dx, dw, db = nn.conv3x3_backward(up, cache)
    assert rel_error(dx, central_difference(f, x)) < TOL
    assert rel_error(dw, central_difference(f, w)) < TOL
    assert rel_error(db, central_difference(f, b)) < TOL


def test_conv_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(2)
    _, cache = nn.conv3x3_forward(rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
    dx, dw, db = nn.conv3x3_backward(np.zeros((2, 4, 4)), cache)
    assert not dx.any() and not dw.any() and not db.any()


def _check_elementwise(fwd, bwd_from, x):
    rng = np.random.default_rng(3)
    up = rng.normal(size=x.shape)

    def f():
        return float(np.sum(fwd(x) * up))

    assert rel_error(bwd_from(up, x), central_difference(f, x)) < TOL


def test_relu_sigmoid_tanh_gradients():
    rng = np.random.default_rng(4)
    x = away_from_zero(rng, (3, 4, 4))
    _check_elementwise(nn.relu, lambda g, x: nn.relu_backward(g, x), x)
    _check_elementwise(nn.sigmoid, lambda g, x: nn.sigmoid_backward(g, nn.sigmoid(x)), x)
    _check_elementwise(np.tanh, lambda g, x: nn.tanh_backward(g, np.tanh(x)), x)


def test_sigmoid_is_stable():
    assert nn.sigmoid(np.array([-1000.0, 0.0, 1000.0])).tolist() == [0.0, 0.5, 1.0]


def test_channel_max_value_and_gradient():
    f_conf = np.array([0.2, 0.7, 0.1]).reshape(3, 1, 1)
    y, arg = nn.channel_max(f_conf)
    assert y[0, 0, 0] == 0.7 and arg[0, 0] == 1
    rng = np.random.default_rng(5)
    x = rng.permutation(48).reshape(3, 4, 4) * 0.1
    up = rng.normal(size=(1, 4, 4))
    y, arg = nn.channel_max(x)
    assert rel_error(nn.channel_max_backward(up, arg, 3), central_difference(lambda: float(np.sum(nn.channel_max(x)[0] * up)), x)) < TOL


def test_gate_value_and_gradient():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(4, 4, 4))
    gated, s = nn.gate_forward(np.zeros((1, 4, 4)), X)
    assert np.array_equal(gated, 0.5 * X)
    logit = rng.normal(size=(1, 4, 4))
    up = rng.normal(size=X.shape)
    _, s = nn.gate_forward(logit, X)
    dl, dx = nn.gate_backward(up, s, X)

    def f():
        return float(np.sum(nn.gate_forward(logit, X)[0] * up))

    assert rel_error(dl, central_difference(f, logit)) < TOL
    assert rel_error(dx, central_difference(f, X)) < TOL


def test_focal_loss_gradient_and_value():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 4, 4))
    target = rng.random((3, 4, 4)) * 0.9
    target[0, 1, 2] = target[2, 3, 3] = 1.0
    loss, g = nn.focal_loss(logits, target)
    assert rel_error(g, central_difference(lambda: nn.focal_loss(logits, target)[0], logits)) < TOL
    # one positive at p=0.5: (0.5)^2 * ln 2
    one = np.zeros((1, 1, 1))
    assert nn.focal_loss(one, np.ones((1, 1, 1)))[0] == pytest.approx(0.25 * math.log(2))
    assert nn.focal_loss(np.full((1, 2, 2), -30.0), np.zeros((1, 2, 2)))[0] < 1e-20


def test_bce():
    assert nn.bce_with_logits(np.zeros(1), np.ones(1))[0] == pytest.approx(0.693147, abs=1e-6)
    rng = np.random.default_rng(8)
    logits, target = rng.normal(size=(1, 4, 4)), rng.random((1, 4, 4))
    _, g = nn.bce_with_logits(logits, target)
    assert rel_error(g, central_difference(lambda: nn.bce_with_logits(logits, target)[0], logits)) < TOL


def test_weighted_l1():
    assert nn.weighted_l1(np.array([[0.5]]), np.array([[0.6]]), [1.0], 1.0)[0] == pytest.approx(0.1)
    loss, g = nn.weighted_l1(np.zeros((0, 2)), np.zeros((0, 2)), [], 1.0)
    assert loss == 0.0 and g.shape == (0, 2)
    rng = np.random.default_rng(9)
    pred, tgt, w = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.random(5)
    _, g = nn.weighted_l1(pred, tgt, w, 3.0)
    assert rel_error(g, central_difference(lambda: nn.weighted_l1(pred, tgt, w, 3.0)[0], pred)) < TOL


def test_gather_scatter_adjoint():
    rng = np.random.default_rng(10)
    C, H, W = 3, 5, 6
    x = rng.normal(size=(C, H, W))
    pf = nn.pad_flat(x)
    q = nn.flat_index([0, 2, 4], [5, 3, 0], W)
    offs = nn.tap_offsets(W)
    cols = nn.gather_cols(pf, q, offs)
    d = rng.normal(size=cols.shape)
    back = nn.scatter_cols(d, q, offs, pf.shape[1])
    assert np.sum(cols * d) == pytest.approx(np.sum(pf * back))


def test_kernel_matrix_round_trip():
    w = np.random.default_rng(11).normal(size=(2, 3, 3, 3))
    assert np.array_equal(nn.kernel_from_matrix(nn.kernel_matrix(w), 3), w)
