"""Low-level array operations with explicit forward/backward pairs.

Every forward returns ``(output, cache)``; the matching backward consumes the
upstream gradient and the cache and returns gradients for each differentiable
input, in the order the forward takes them.  Image tensors are channel-first
``(N, C, H, W)``.  All operations preserve the dtype of their inputs, so the
same code path serves float32 training and float64 gradient checking.

Heavy lifting goes through two routes: matrix products (convolution is
im2col + one matmul, columns kept for the backward pass) and the fused
single-pass loops in :mod:`scriptid.kernels` for everything memory-bound
(pooling, batch-norm statistics and affine maps, layout shuffles).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvalidInputError, ShapeError

# Sigmoid saturates to machine precision well inside +/-50; clipping there
# avoids exp overflow warnings without changing any representable output.
_SIGMOID_CLIP = 50.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_SIGMOID_CLIP, _SIGMOID_CLIP)))


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out


def relu_backward(gy, out, inplace=False):
    if inplace and gy.flags.c_contiguous and out.flags.c_contiguous:
        kernels.relu_bwd(gy.reshape(-1), out.reshape(-1))
        return gy
    return gy * (out > 0)


def squared_sum(arr):
    """Sum of squared entries via a BLAS dot on the flattened array."""
    flat = np.ascontiguousarray(arr).ravel()
    return float(np.dot(flat, flat))


# ---------------------------------------------------------------------------
# convolution (cross-correlation, no kernel flip)
# ---------------------------------------------------------------------------


def conv2d_forward(x, kernel, bias, stride=1, pad=0):
    """Cross-correlate ``x (N,C,H,W)`` with ``kernel (O,C,kh,kw)`` plus bias.

    Output spatial size is ``floor((H + 2*pad - kh)/stride) + 1``.
    """
    n, c, h, w = x.shape
    o, c2, kh, kw = kernel.shape
    if c != c2:
        raise ShapeError(f"conv input has {c} channels, kernels expect {c2}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv input {hp}x{wp} smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    x = np.ascontiguousarray(x)
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
    kernels.im2col(x, kh, kw, stride, oh, ow, cols)
    y2d = cols @ kernel.reshape(o, -1).T
    y2d += bias
    y = np.empty((n, o, oh, ow), dtype=x.dtype)
    kernels.rows_to_nchw(y2d, oh, ow, y)
    cache = (cols, x.shape, kernel, stride, pad, oh, ow)
    return y, cache


def conv2d_backward(gy, cache, need_dx=True):
    """Gradients of conv2d. Returns ``(dx, dkernels, dbias)``; dx may be None."""
    cols, x_shape, kernel, stride, pad, oh, ow = cache
    o, c, kh, kw = kernel.shape
    n = x_shape[0]
    gym = np.empty((n * oh * ow, o), dtype=gy.dtype)
    kernels.nchw_to_rows(np.ascontiguousarray(gy), gym)
    dkernels = (gym.T @ cols).reshape(kernel.shape)
    dbias = gym.sum(axis=0)
    dx = None
    if need_dx:
        dcols = gym @ kernel.reshape(o, -1)
        dx = np.zeros(x_shape, dtype=gy.dtype)
        kernels.col2im(dcols, kh, kw, stride, oh, ow, dx)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dkernels, dbias


# ---------------------------------------------------------------------------
# max pooling, ceil-mode output size
# ---------------------------------------------------------------------------


def maxpool_ceil_forward(x, k, stride, pad):
    """Max pool with output size ``ceil((H + 2*pad - k)/stride) + 1``.

    Padded positions act as -inf so they never beat a real pixel; ceil mode
    lets the last window overhang the padded edge. The winning window cell
    (first on ties, scanning row-major) is recorded for the backward pass.
    """
    if k < 1:
        raise InvalidInputError("pool kernel must be >= 1")
    n, c, h, w = x.shape
    oh = -((h + 2 * pad - k) // -stride) + 1
    ow = -((w + 2 * pad - k) // -stride) + 1
    x = np.ascontiguousarray(x)
    y = np.empty((n, c, oh, ow), dtype=x.dtype)
    best = np.empty((n, c, oh, ow), dtype=np.uint8)
    kernels.pool_fwd(x, k, stride, pad, y, best)
    cache = (x.shape, best, k, stride, pad)
    return y, cache


def maxpool_ceil_backward(gy, cache):
    """Route each output's gradient to its recorded max position."""
    x_shape, best, k, stride, pad = cache
    dx = np.zeros(x_shape, dtype=gy.dtype)
    kernels.pool_bwd(np.ascontiguousarray(gy), best, k, stride, pad, dx)
    return dx


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects 2D or 4D input, got {x.ndim}D")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps, momentum,
                      mode, update_running=True):
    """Normalize per channel. ``x`` is (N, C, H, W) or (N, C).

    Train mode uses batch statistics and (optionally) folds them into the
    running estimates as ``r = (1 - momentum) * r + momentum * batch``; eval
    mode uses the running estimates. Running variance uses the unbiased batch
    variance so that its expectation matches the population variance.
    """
    axes, shape = _bn_axes(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigurationError("batch norm in train mode needs a batch of >= 2")
        if x.ndim == 4:
            x = np.ascontiguousarray(x)
            mom = kernels.channel_moments(x).sum(axis=0)
            mean = mom[0] / count
            var = np.maximum(mom[1] / count - mean * mean, 0.0)
        else:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
        if update_running:
            bessel = count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += (momentum * mean).astype(running_mean.dtype)
            running_var *= 1.0 - momentum
            running_var += (momentum * var * bessel).astype(running_var.dtype)
    elif mode == "eval":
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    else:
        raise InvalidInputError(f"unknown batchnorm mode {mode!r}")
    invstd = 1.0 / np.sqrt(var + eps)
    # fold normalization and scale/shift into one per-channel affine map
    a = (gamma * invstd).astype(x.dtype)
    b = (beta - mean * gamma * invstd).astype(x.dtype)
    if x.ndim == 4:
        y = np.empty_like(x)
        kernels.channel_affine(x, a, b, y)
    else:
        y = x * a.reshape(shape) + b.reshape(shape)
    cache = (x, mean.astype(x.dtype), invstd.astype(x.dtype), gamma, mode, axes, shape)
    return y, cache


def batchnorm_backward(gy, cache):
    """Returns ``(dx, dgamma, dbeta)``.

    Train mode differentiates through the batch statistics; eval mode treats
    the running statistics as constants. The input gradient reduces to a
    per-channel affine map of (gy, x), so x-hat is never materialized.
    """
    x, mean, invstd, gamma, mode, axes, shape = cache
    if x.ndim == 4:
        gy = np.ascontiguousarray(gy)
        gm = kernels.channel_grad_moments(gy, x).sum(axis=0)
        s1, sx = gm[0], gm[1]
    else:
        s1 = gy.sum(axis=axes, dtype=np.float64)
        sx = (gy * x).sum(axis=axes, dtype=np.float64)
    dgamma = ((sx - mean * s1) * invstd).astype(x.dtype)
    dbeta = s1.astype(x.dtype)
    g = (gamma * invstd).astype(np.float64)
    if mode == "eval":
        if x.ndim == 4:
            dx = np.empty_like(gy)
            kernels.channel_affine(gy, g.astype(x.dtype),
                                   np.zeros_like(dgamma), dx)
        else:
            dx = gy * g.reshape(shape).astype(x.dtype)
        return dx, dgamma, dbeta
    count = int(np.prod([x.shape[a] for a in axes]))
    # dx = g * (gy - s1/N - xhat * dgamma/N), expanded to affine in (gy, x)
    bx = g * invstd * dgamma / count
    c0 = -g * (s1 / count) + bx * mean
    if x.ndim == 4:
        dx = np.empty_like(gy)
        kernels.channel_affine_pair(gy, x, g.astype(x.dtype), bx.astype(x.dtype),
                                    c0.astype(x.dtype), dx)
    else:
        dx = (gy * g.reshape(shape) - x * bx.reshape(shape)
              + c0.reshape(shape)).astype(x.dtype)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# fully connected, dropout
# ---------------------------------------------------------------------------


def linear_forward(x, weights, bias):
    """``y = x @ weights.T + bias`` with x (N, in), weights (out, in)."""
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear input dim {x.shape[1]} != weight dim {weights.shape[1]}")
    y = x @ weights.T
    y += bias
    return y, (x, weights)


def linear_backward(gy, cache):
    x, weights = cache
    return gy @ weights, gy.T @ x, gy.sum(axis=0)


def dropout_forward(x, rate, mode, rng):
    """Inverted dropout: train scales kept units by 1/(1-rate), eval is identity."""
    if mode != "train" or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(gy, keep):
    if keep is None:
        return gy
    return gy * keep


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(x, mask=None, axis=-1):
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable booleans, True = participate) excludes entries
    from the normalizer entirely; excluded entries come back exactly 0.
    """
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=axis).all():
            raise InvalidInputError("softmax: some slice is fully masked")
        z = np.where(mask, x, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z) * mask
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(gp, p, axis=-1):
    """Jacobian-vector product of softmax: ``dx = p * (gp - sum(p * gp))``."""
    return p * (gp - (p * gp).sum(axis=axis, keepdims=True))
