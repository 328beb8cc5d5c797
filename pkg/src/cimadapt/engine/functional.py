"""CNN primitives with hand-written backward rules.

Convolutions use the cross-correlation convention and an im2col lowering whose
column order is (channel, kernel row, kernel column), so a contiguous block of
input channels maps to a contiguous block of im2col columns.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair_check(op: str, x: np.ndarray, ndim: int) -> None:
    if x.ndim != ndim:
        raise ValueError(f"{op}: expected a {ndim}-d input, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Lower (N, C, H, W) to (N*Ho*Wo, C*k*k) patches."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    _pair_check("conv2d", x.data, 4)
    _pair_check("conv2d", weight.data, 4)
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels but weight {weight.shape} expects {cin}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    n = x.shape[0]
    cols, ho, wo = im2col(x.data, kh, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} filters")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    x_shape = x.shape

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = col2im(gmat @ wmat, x_shape, kh, stride, padding, ho, wo) if x.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor.from_op(np.ascontiguousarray(out), parents, backward)


def linear(x, weight, bias=None) -> Tensor:
    """y = x W^T + b; inputs with more than two dims are flattened per sample."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight {weight.shape}")
    a, w = x.data, weight.data
    out = a @ w.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ w, g.T @ a]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return Tensor.from_op(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is customary).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _pair_check("batch_norm", x.data, 4)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    a = x.data
    if training:
        m = a.shape[0] * a.shape[2] * a.shape[3]
        mu = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu[None, :, None, None]) * inv[None, :, None, None]
    g_ = gamma.data[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            dx = inv[None, :, None, None] * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    _pair_check("max_pool2d", x.data, 4)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d: window {kernel} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        di, dj = np.divmod(arg, kernel)
        for i in range(kernel):
            for j in range(kernel):
                sel = (di == i) & (dj == j)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def avg_pool2d(x, kernel: int | None = None, stride: int | None = None) -> Tensor:
    """Average pooling; ``kernel=None`` pools globally to 1x1."""
    x = as_tensor(x)
    _pair_check("avg_pool2d", x.data, 4)
    n, c, h, w = x.shape
    if kernel is None:
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
    stride = stride or kernel
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(-2, -1))

    def backward(g):
        gx = np.zeros(x.shape)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Tensor.from_op(loss, (logits,), backward)
