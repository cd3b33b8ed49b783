"""Layer gradients, the Adam update rule, and the ELM solver."""

import numpy as np
import pytest

from speechqa import nn
from speechqa.errors import DataError, TrainingDivergedError


def numerical_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_layer(layer, x, rtol=1e-7):
    """Backward pass vs finite differences on inputs and parameters."""
    probe = np.random.default_rng(0).normal(size=layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * probe))

    layer.forward(x)
    dx = layer.backward(probe)
    dx_num = numerical_grad(loss, x)
    scale = max(np.max(np.abs(dx_num)), 1e-8)
    assert np.max(np.abs(dx - dx_num)) / scale < rtol
    layer.forward(x)
    layer.backward(probe)
    for p, g in zip(layer.params(), layer.grads()):
        g_analytic = g.copy()
        g_num = numerical_grad(loss, p)
        scale = max(np.max(np.abs(g_num)), 1e-8)
        assert np.max(np.abs(g_analytic - g_num)) / scale < rtol


def test_dense_gradients(rng):
    layer = nn.Dense(5, 3, rng)
    check_layer(layer, rng.normal(size=(4, 5)))


def test_conv2d_gradients(rng):
    layer = nn.Conv2d(2, 3, (3, 2), rng)
    check_layer(layer, rng.normal(size=(2, 2, 6, 5)))


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 2, 6, 7))
    layer = nn.Conv2d(2, 3, (3, 3), rng)
    y = layer.forward(x)
    ref = np.zeros_like(y)
    for i in range(2):
        for o in range(3):
            for r in range(4):
                for c in range(5):
                    acc = layer.b[o]
                    for j in range(2):
                        acc += np.sum(x[i, j, r:r + 3, c:c + 3] * layer.w[o, j])
                    ref[i, o, r, c] = acc
    assert np.max(np.abs(y - ref)) < 1e-12


def test_conv2d_shape_validation(rng):
    layer = nn.Conv2d(2, 3, (5, 5), rng)
    with pytest.raises(DataError):
        layer.forward(rng.normal(size=(1, 2, 3, 3)))
    with pytest.raises(DataError):
        layer.forward(rng.normal(size=(1, 1, 8, 8)))


def test_maxpool_gradients_and_floor(rng):
    layer = nn.MaxPool2d()
    x = rng.normal(size=(2, 3, 5, 7))      # odd sizes exercise floor semantics
    y = layer.forward(x)
    assert y.shape == (2, 3, 2, 3)
    check_layer(layer, x)


def test_relu_gradients(rng):
    check_layer(nn.ReLU(), rng.normal(size=(6, 9)))


def test_dropout_inference_identity(rng):
    layer = nn.Dropout(0.5, rng)
    layer.training = False
    x = rng.normal(size=(4, 10))
    assert np.array_equal(layer.forward(x), x)


def test_dropout_training_unbiased(rng):
    layer = nn.Dropout(0.25, rng)
    x = np.ones((200, 500))
    y = layer.forward(x)
    kept = y[y > 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(np.mean(y) - 1.0) < 0.01


def test_flatten_round_trip(rng):
    layer = nn.Flatten()
    x = rng.normal(size=(3, 2, 4, 5))
    y = layer.forward(x)
    assert y.shape == (3, 40)
    assert np.array_equal(layer.backward(y), x)


def test_mse_loss_and_gradient(rng):
    pred = rng.normal(size=8)
    target = rng.normal(size=8)
    loss, grad = nn.mse_loss(pred, target)
    assert loss == pytest.approx(np.mean((pred - target) ** 2), rel=1e-12)
    num = numerical_grad(lambda: nn.mse_loss(pred, target)[0], pred)
    assert np.max(np.abs(grad - num)) < 1e-8


def test_adam_first_step_magnitude():
    p = np.array([1.0, 1.0])
    opt = nn.Adam([p], lr=1e-3)
    opt.step([np.array([0.5, -0.2])])
    # bias-corrected first step is -lr * sign(g) up to eps
    assert np.allclose(p, [1.0 - 1e-3, 1.0 + 1e-3], atol=1e-7)


def test_adam_converges_on_bowl():
    p = np.array([3.0, -2.0])
    opt = nn.Adam([p], lr=0.05)
    for _ in range(500):
        opt.step([2.0 * p])
    assert np.max(np.abs(p)) < 1e-3


def test_adam_rejects_nonfinite_gradient():
    opt = nn.Adam([np.zeros(2)])
    with pytest.raises(TrainingDivergedError):
        opt.step([np.array([np.nan, 0.0])])


def test_adam_state_round_trip(rng):
    p = rng.normal(size=4)
    opt = nn.Adam([p], lr=0.01)
    for _ in range(3):
        opt.step([rng.normal(size=4)])
    state = {k: v.copy() for k, v in opt.state_arrays().items()}
    opt2 = nn.Adam([p.copy()], lr=0.01)
    opt2.load_state_arrays(state)
    assert opt2.t == opt.t
    assert np.array_equal(opt2.m[0], opt.m[0])
    assert np.array_equal(opt2.v[0], opt.v[0])


def test_elm_matches_pseudo_inverse(rng):
    x = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    elm = nn.ElmModel(4, n_hidden=8, ridge=0.0, rng=rng)
    elm.fit(x, y)
    h = elm.hidden(x)
    beta_ref = np.linalg.pinv(h) @ y
    assert np.max(np.abs(elm.beta - beta_ref)) < 1e-8


def test_elm_fits_smooth_function(rng):
    x = rng.uniform(-2, 2, size=(300, 1))
    y = np.sin(2.0 * x[:, 0])
    elm = nn.ElmModel(1, n_hidden=64, ridge=1e-8, rng=rng)
    elm.fit(x, y)
    err = np.max(np.abs(elm.predict(x) - y))
    assert err < 0.05


def test_elm_singular_system_rejected(rng):
    h = np.zeros((10, 5))
    with pytest.raises(DataError):
        nn.elm_solve(h, np.zeros(10), 0.0)


def test_elm_unfitted_predict_rejected(rng):
    elm = nn.ElmModel(3, n_hidden=4, rng=rng)
    with pytest.raises(DataError):
        elm.predict(rng.normal(size=(2, 3)))
