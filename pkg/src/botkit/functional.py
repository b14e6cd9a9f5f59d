"""Fused network operations with hand-written backward rules.

All image operations use NCHW layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result, unbroadcast

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_pool_args(kernel: int, stride: int) -> None:
    if kernel <= 0 or stride <= 0:
        raise ValueError(f"kernel and stride must be positive, got kernel={kernel}, stride={stride}")


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Strided view of shape (N, C, out_h, out_w, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]


def _scatter_windows(target: np.ndarray, cols: np.ndarray, stride: int, out_h: int, out_w: int) -> None:
    """Adjoint of :func:`_windows`: add cols (N, C, out_h, out_w, kh, kw) into target."""
    kh, kw = cols.shape[-2:]
    for i in range(kh):
        for j in range(kw):
            target[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[..., i, j]


# ------------------------------------------------------------------- convolution
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        weight: filters of shape (K, C, kh, kw).
        bias: optional (K,) offsets.
        stride: step between windows.
        padding: zero padding on each spatial border.

    Returns:
        Tensor of shape (N, K, H', W') with H' = (H + 2p - kh) // stride + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride <= 0 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if c != wc:
        raise ValueError(
            f"conv2d channel mismatch: input has C={c} channels but weight expects C={wc} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)

    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride]
        w2 = weight.data.reshape(k, c)
        out = np.matmul(w2, xs.reshape(n, c, out_h * out_w)).reshape(n, k, out_h, out_w)
    else:
        xp = _pad(x.data, padding)
        cols = _windows(xp, kh, kw, stride, out_h, out_w)
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        if pointwise:
            g3 = g.reshape(n, k, out_h * out_w)
            xs3 = xs.reshape(n, c, out_h * out_w)
            gw = np.einsum("nkp,ncp->kc", g3, xs3, optimize=True).reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gxs = np.matmul(w2.T, g3).reshape(n, c, out_h, out_w)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gxs
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gx = None
            if x.requires_grad:
                gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, oh, ow, c, kh, kw
                gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                _scatter_windows(gxp, gcols, stride, out_h, out_w)
                gx = _unpad(gxp, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, "conv2d", backward)


# ----------------------------------------------------------------------- pooling
def max_pool2d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum; gradient flows to the first maximal entry of each window."""
    _check_pool_args(kernel, stride)
    x = as_tensor(x)
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ValueError(f"pool kernel {kernel} exceeds padded input {h}x{w} (+{padding})")
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, out_h, out_w).reshape(n, c, out_h, out_w, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += g * hit
        return (_unpad(gxp, padding),)

    return make_result(out, (x,), "max_pool2d", backward)


def avg_pool2d(x, kernel: int, stride: int) -> Tensor:
    _check_pool_args(kernel, stride)
    x = as_tensor(x)
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"pool kernel {kernel} exceeds input {h}x{w}")
    out_h = conv_output_size(h, kernel, stride, 0)
    out_w = conv_output_size(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride, out_h, out_w)
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g * scale
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += share
        return (gx,)

    return make_result(out, (x,), "avg_pool2d", backward)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", backward)


# ------------------------------------------------------------- batch normalisation
def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch mean and population variance normalise the
    input, and ``running_mean``/``running_var`` are updated in place unless
    ``update_stats`` is False (used for the perturbed SAM pass). In eval mode
    the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    count = n * h * w
    if count == 0 or c == 0:
        raise ValueError(f"batch_norm2d got an empty channel slab, input shape {x.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        if count < 2:
            raise ValueError(f"batch_norm2d in train mode needs N*H*W >= 2, got {count}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = g4 * xhat + b4

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            gx = (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            ) * (inv_std.reshape(1, c, 1, 1) / count)
        else:
            gx = dxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), "batch_norm2d", backward)


# ----------------------------------------------------------- dense + activations
def linear(x, weight, bias=None) -> Tensor:
    """(N, D) @ (D, M) + (M,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, unbroadcast(g, bias.shape)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, "linear", backward)


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0. NaN passes through."""
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), "relu", lambda g: (g * mask,))


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for a {ndim}-D tensor")
    return axis % ndim


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    s = _softmax_np(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), "log_softmax", backward)


def cross_entropy(logits, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]; logits (N, K), integer labels (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", backward)
