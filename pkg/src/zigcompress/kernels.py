"""Forward kernels and vector-Jacobian products.

Everything here runs in float64.  Convolutions and pooling use strided window
views rather than explicit loops over output pixels; the reductions stay in a
fixed order so results are reproducible run to run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _out_size(size, k, s, p):
    return (size + 2 * p - k) // s + 1


# -- convolution / linear -------------------------------------------------


def conv2d(x, w, b, stride, padding):
    (sh, sw), (ph, pw) = stride, padding
    o, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = _out_size(h, kh, sh, ph), _out_size(wd, kw, sw, pw)
    win = _windows(_pad(x, ph, pw), kh, kw, sh, sw, ho, wo)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    y = y.transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_vjp(gy, x, w, stride, padding, with_bias: bool):
    (sh, sw), (ph, pw) = stride, padding
    o, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    xp = _pad(x, ph, pw)
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    gb = gy.sum(axis=(0, 2, 3)) if with_bias else None
    gwin = np.tensordot(gy, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
    return np.ascontiguousarray(gx), gw, gb


def linear(x, w, b):
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def linear_vjp(gy, x, w, with_bias: bool):
    gx = gy @ w
    gw = gy.T @ x
    gb = gy.sum(axis=0) if with_bias else None
    return gx, gw, gb


# -- batch norm -------------------------------------------------------------


def batchnorm2d_train(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, mean, var)


def batchnorm2d_eval(x, gamma, beta, running_mean, running_var, eps):
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean[None, :, None, None]) * inv[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], (xhat, inv)


def batchnorm2d_train_vjp(gy, gamma, ctx):
    xhat, inv = ctx[0], ctx[1]
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    gx = (gamma * inv)[None, :, None, None] * (
        gy - (gbeta / m)[None, :, None, None] - xhat * (ggamma / m)[None, :, None, None]
    )
    return gx, ggamma, gbeta


def batchnorm2d_eval_vjp(gy, gamma, ctx):
    xhat, inv = ctx
    return (gamma * inv)[None, :, None, None] * gy, (gy * xhat).sum(axis=(0, 2, 3)), gy.sum(axis=(0, 2, 3))


# -- elementwise / pooling ---------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_vjp(gy, x):
    # derivative at exactly 0 is taken as 0
    return gy * (x > 0)


def maxpool2d(x, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    win = _windows(_pad(x, ph, pw, -np.inf), kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool2d_vjp(gy, x_shape, arg, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    n, c, h, w = x_shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            hit = arg == (i * kw + j)
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gy * hit
    return gxp[:, :, ph : ph + h, pw : pw + w]


def avgpool2d(x, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    win = _windows(_pad(x, ph, pw), kh, kw, sh, sw, ho, wo)
    return np.ascontiguousarray(win.sum(axis=(4, 5)) / (kh * kw))


def avgpool2d_vjp(gy, x_shape, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    n, c, h, w = x_shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    share = gy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += share
    return gxp[:, :, ph : ph + h, pw : pw + w]


def add(*xs):
    y = xs[0].copy()
    for x in xs[1:]:
        y += x
    return y


def add_vjp(gy, n_inputs):
    return [gy] * n_inputs


def mul(*xs):
    y = xs[0].copy()
    for x in xs[1:]:
        y *= x
    return y


def mul_vjp(gy, xs):
    grads = []
    for i in range(len(xs)):
        g = gy.copy()
        for j, x in enumerate(xs):
            if j != i:
                g *= x
        grads.append(g)
    return grads


def concat(xs, axis):
    return np.concatenate(xs, axis=axis)


def concat_vjp(gy, sizes, axis):
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(gy, bounds, axis=axis)]


def flatten(x):
    return x.reshape(x.shape[0], -1)


def flatten_vjp(gy, x_shape):
    return gy.reshape(x_shape)


# -- loss ---------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
