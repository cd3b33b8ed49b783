"""From-scratch differentiable layers, loss, Adam, and the ELM solver.

Layers store float64 parameters and return exact analytic gradients; every
backward pass is validated against central finite differences in the test
suite. Shapes follow the (batch, ...) convention.
"""

import numpy as np
from scipy.signal import correlate

from .errors import DataError, TrainingDivergedError


class Layer:
    """Forward caches whatever backward needs; params/grads are parallel lists."""

    training = True

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        limit = np.sqrt(1.0 / n_in)
        self.w = rng.uniform(-limit, limit, (n_out, n_in))
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x):
        if x.shape[1] != self.w.shape[1]:
            raise DataError(f"dense expected {self.w.shape[1]} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.dw[...] = dy.T @ self._x
        self.db[...] = dy.sum(axis=0)
        return dy @ self.w


class Conv2d(Layer):
    """Valid-padding stride-1 cross-correlation on (batch, ch, h, w)."""

    def __init__(self, in_channels, out_channels, kernel_hw, rng):
        kh, kw = kernel_hw
        fan_in = in_channels * kh * kw
        limit = np.sqrt(1.0 / fan_in)
        self.w = rng.uniform(-limit, limit, (out_channels, in_channels, kh, kw))
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x):
        n, c, h, w = x.shape
        oc, ic, kh, kw = self.w.shape
        if c != ic:
            raise DataError(f"conv expected {ic} channels, got {c}")
        if kh > h or kw > w:
            raise DataError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        self._x = x
        y = np.empty((n, oc, h - kh + 1, w - kw + 1))
        for i in range(n):
            for o in range(oc):
                acc = self.b[o]
                for j in range(ic):
                    acc = acc + correlate(x[i, j], self.w[o, j], mode="valid")
                y[i, o] = acc
        return y

    def backward(self, dy):
        x = self._x
        n, c, _, _ = x.shape
        oc, ic, kh, kw = self.w.shape
        self.dw.fill(0.0)
        self.db[...] = dy.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        for i in range(n):
            for o in range(oc):
                g = dy[i, o]
                for j in range(ic):
                    self.dw[o, j] += correlate(x[i, j], g, mode="valid")
                    # full convolution of the upstream gradient with the kernel
                    dx[i, j] += correlate(np.pad(g, ((kh - 1,), (kw - 1,))),
                                          self.w[o, j][::-1, ::-1], mode="valid")
        return dx


class MaxPool2d(Layer):
    """2x2 max pooling with floor semantics; gradient goes to the argmax."""

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        self._in_shape = x.shape
        v = x[:, :, :ho * 2, :wo * 2].reshape(n, c, ho, 2, wo, 2)
        windows = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        self._argmax = windows.argmax(axis=4)
        return windows.max(axis=4)

    def backward(self, dy):
        n, c, h, w = self._in_shape
        ho, wo = h // 2, w // 2
        dx = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(dx, self._argmax[..., None], dy[..., None], axis=4)
        dx = dx.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        out = np.zeros((n, c, h, w))
        out[:, :, :ho * 2, :wo * 2] = dx.reshape(n, c, ho * 2, wo * 2)
        return out


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: identity at inference, unbiased scaling in training."""

    def __init__(self, rate, rng):
        if not (0.0 <= rate < 1.0):
            raise DataError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Adam:
    """Bias-corrected Adam over a flat list of parameter arrays."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError("non-finite gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        return {"t": np.array([float(self.t)]),
                **{f"m{i}": m for i, m in enumerate(self.m)},
                **{f"v{i}": v for i, v in enumerate(self.v)}}

    def load_state_arrays(self, entries):
        self.t = int(entries["t"][0])
        for i in range(len(self.m)):
            self.m[i][...] = entries[f"m{i}"]
            self.v[i][...] = entries[f"v{i}"]


# ---------------------------------------------------------------------------
# Extreme learning machine


class ElmModel:
    """Single hidden layer with frozen random input weights.

    Hidden activations are sigmoid; output weights come from ridge least
    squares, (H'H + lambda I) beta = H'y.
    """

    def __init__(self, n_in, n_hidden=512, ridge=1e-6, rng=None):
        rng = rng or np.random.default_rng()
        self.w_in = rng.normal(0.0, 1.0, (n_hidden, n_in))
        self.b_in = rng.normal(0.0, 1.0, n_hidden)
        self.ridge = ridge
        self.beta = None

    def hidden(self, x):
        z = np.atleast_2d(x) @ self.w_in.T + self.b_in
        return 1.0 / (1.0 + np.exp(-z))

    def fit(self, x, y):
        h = self.hidden(x)
        y = np.asarray(y, dtype=np.float64)
        if len(h) != len(y):
            raise DataError("row count of features and targets differ")
        self.beta = elm_solve(h, y, self.ridge)
        return self

    def predict(self, x):
        if self.beta is None:
            raise DataError("ELM not fitted")
        return self.hidden(x) @ self.beta


def elm_solve(h, y, ridge):
    """Ridge normal equations; a singular unregularized system is an error."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    gram = h.T @ h + ridge * np.eye(h.shape[1])
    rhs = h.T @ y
    if ridge == 0.0 and np.linalg.cond(gram) > 1e12:
        raise DataError("singular ELM system; use a positive ridge")
    beta = np.linalg.solve(gram, rhs)
    residual = np.linalg.norm(gram @ beta - rhs)
    if residual > 1e-6 * max(np.linalg.norm(rhs), 1.0):
        raise DataError("ELM normal-equation solve failed to converge")
    return beta
