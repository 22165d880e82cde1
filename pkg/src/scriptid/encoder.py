"""Patch encoder: a four-conv + two-fc stack mapping 32x32 patches to features.

The stack (default widths 96/256/384/512) is:

    conv 5x5 s1 -> bn -> relu -> maxpool 3/2/1 (ceil)
    conv 3x3 s1 -> bn -> relu -> maxpool 3/2/1
    conv 3x3 s1 -> bn -> relu -> maxpool 3/2/1
    conv 1x1 s1 -> bn -> relu
    flatten -> fc -> relu -> dropout -> fc

Spatial sizes for a 32x32 input run 28, 15, 13, 7, 5, 3, 3; with the default
widths the flattened size is 512*3*3 = 4608, fc1 has 4096 units and the output
feature is a 256-dim vector. All patches share one parameter set. Widths are
configurable so gradient checks can run on a narrow copy of the same
structure.

Each conv->bn->relu block runs as one im2col matmul plus fused kernels that
compute the batch statistics and apply normalize+relu straight off the gemm's
row layout; the mathematics is identical to composing the standalone ops in
:mod:`scriptid.ops`, and the whole path is held to finite differences by the
gradient-check suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .errors import ConfigurationError, NumericFaultError, ShapeError

_CONV_KERNELS = (5, 3, 3, 1)
_POOL_AFTER = (True, True, True, False)
_MOMENT_CHUNKS = 16  # fixed partial count keeps reductions thread-count independent


@dataclass
class ConvLayerParams:
    kernels: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray     # (out_ch,)
    stride: int = 1
    pad: int = 0


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class FcLayerParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)


@dataclass
class EncoderParams:
    convs: list        # four ConvLayerParams
    bns: list          # four BatchNormParams
    fc1: FcLayerParams
    fc2: FcLayerParams
    dropout_rate: float = 0.5


@dataclass
class _BlockCache:
    cols: np.ndarray
    x_shape: tuple
    y2d: np.ndarray
    post: np.ndarray
    mean: np.ndarray      # float64 (C,)
    invstd: np.ndarray    # float64 (C,)
    oh: int
    ow: int
    count: int
    mode: str


@dataclass
class EncoderTrace:
    blocks: list = field(default_factory=list)
    pool_caches: list = field(default_factory=list)
    flat_shape: tuple = ()
    fc1_cache: tuple = ()
    relu_fc_out: np.ndarray = None
    drop_keep: np.ndarray = None
    fc2_cache: tuple = ()


def layer_shape_chain(channels, conv_channels, fc1_dim, feature_dim, input_size=32):
    """Expected (C, H, W) after each stage, then the flattened/fc sizes."""
    chain = [("input", (channels, input_size, input_size))]
    size = input_size
    for i, (out_ch, k) in enumerate(zip(conv_channels, _CONV_KERNELS)):
        size = size - k + 1
        chain.append((f"conv{i + 1}", (out_ch, size, size)))
        if _POOL_AFTER[i]:
            size = -((size + 2 - 3) // -2) + 1
            chain.append((f"pool{i + 1}", (out_ch, size, size)))
    chain.append(("flatten", (conv_channels[-1] * size * size,)))
    chain.append(("fc1", (fc1_dim,)))
    chain.append(("fc2", (feature_dim,)))
    return chain


def _block_forward(x, conv, bn, mode):
    """conv -> batchnorm -> relu in one gemm plus two fused passes."""
    kern = conv.kernels
    o, cin, kh, kw = kern.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv input has {x.shape[1]} channels, kernels expect {cin}")
    if conv.pad:
        x = np.pad(x, ((0, 0), (0, 0), (conv.pad,) * 2, (conv.pad,) * 2))
    n, _, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"conv input {h}x{w} smaller than kernel {kh}x{kw}")
    oh = (h - kh) // conv.stride + 1
    ow = (w - kw) // conv.stride + 1
    x = np.ascontiguousarray(x)
    cols = np.empty((n * oh * ow, cin * kh * kw), dtype=x.dtype)
    kernels.im2col(x, kh, kw, conv.stride, oh, ow, cols)
    y2d = cols @ kern.reshape(o, -1).T
    y2d += conv.bias
    count = n * oh * ow
    if mode == "train":
        if n < 2:
            raise ConfigurationError("batch norm in train mode needs a batch of >= 2")
        mom = kernels.col_moments(y2d, _MOMENT_CHUNKS).sum(axis=0)
        mean = mom[0] / count
        var = np.maximum(mom[1] / count - mean * mean, 0.0)
        bessel = count / max(count - 1, 1)
        bn.running_mean *= 1.0 - bn.momentum
        bn.running_mean += (bn.momentum * mean).astype(bn.running_mean.dtype)
        bn.running_var *= 1.0 - bn.momentum
        bn.running_var += (bn.momentum * var * bessel).astype(bn.running_var.dtype)
    elif mode == "eval":
        mean = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    invstd = 1.0 / np.sqrt(var + bn.eps)
    a = (bn.gamma * invstd).astype(x.dtype)
    b = (bn.beta - mean * bn.gamma * invstd).astype(x.dtype)
    post = np.empty((n, o, oh, ow), dtype=x.dtype)
    kernels.bn_relu_rows_to_nchw(y2d, a, b, oh, ow, post)
    cache = _BlockCache(cols=cols, x_shape=x.shape, y2d=y2d, post=post,
                        mean=mean, invstd=invstd, oh=oh, ow=ow, count=count,
                        mode=mode)
    return post, cache


def _block_backward(g, cache, conv, bn, need_dx):
    """Gradients through relu -> batchnorm -> conv for one block."""
    kern = conv.kernels
    o = kern.shape[0]
    g = np.ascontiguousarray(g)
    gm = kernels.bn_relu_bwd_moments(g, cache.post, cache.y2d).sum(axis=0)
    s1, sx = gm[0], gm[1]
    mean, invstd = cache.mean, cache.invstd
    dgamma = ((sx - mean * s1) * invstd).astype(g.dtype)
    dbeta = s1.astype(g.dtype)
    gcoef = bn.gamma.astype(np.float64) * invstd
    if cache.mode == "train":
        bx = gcoef * invstd * (sx - mean * s1) * invstd / cache.count
        c0 = -gcoef * (s1 / cache.count) + bx * mean
    else:
        bx = np.zeros_like(gcoef)
        c0 = np.zeros_like(gcoef)
    gym = np.empty((cache.count, o), dtype=g.dtype)
    kernels.bn_relu_bwd_rows(g, cache.post, cache.y2d, gcoef.astype(g.dtype),
                             bx.astype(g.dtype), c0.astype(g.dtype), gym)
    dkernels = (gym.T @ cache.cols).reshape(kern.shape)
    dbias = gym.sum(axis=0)
    dx = None
    if need_dx:
        dcols = gym @ kern.reshape(o, -1)
        dx = np.zeros(cache.x_shape, dtype=g.dtype)
        kernels.col2im(dcols, kern.shape[2], kern.shape[3], conv.stride,
                       cache.oh, cache.ow, dx)
        if conv.pad:
            dx = dx[:, :, conv.pad:-conv.pad, conv.pad:-conv.pad]
    return dx, dkernels, dbias, dgamma, dbeta


def _assert_finite(name, arr):
    if not np.isfinite(arr).all():
        raise NumericFaultError(name)


def encode_batch(x, params, mode="train", rng=None, check_finite=False):
    """Encode (P, C, 32, 32) patches into (P, F) features.

    ``mode`` controls batch norm statistics and dropout. ``rng`` is required
    in train mode when dropout_rate > 0.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (P, C, H, W) patches, got shape {x.shape}")
    trace = EncoderTrace()
    out = x
    for i, (conv, bn) in enumerate(zip(params.convs, params.bns)):
        out, bcache = _block_forward(out, conv, bn, mode)
        trace.blocks.append(bcache)
        if check_finite:
            # the pre-activation catches faults the relu would zero out
            _assert_finite(f"conv{i + 1}", bcache.y2d)
        if _POOL_AFTER[i]:
            out, pcache = ops.maxpool_ceil_forward(out, 3, 2, 1)
            trace.pool_caches.append(pcache)
        else:
            trace.pool_caches.append(None)
    trace.flat_shape = out.shape
    flat = out.reshape(out.shape[0], -1)
    out, trace.fc1_cache = ops.linear_forward(flat, params.fc1.weights, params.fc1.bias)
    out, trace.relu_fc_out = ops.relu_forward(out)
    out, trace.drop_keep = ops.dropout_forward(out, params.dropout_rate, mode, rng)
    if check_finite:
        _assert_finite("fc1", out)
    out, trace.fc2_cache = ops.linear_forward(out, params.fc2.weights, params.fc2.bias)
    if check_finite:
        _assert_finite("fc2", out)
    return out, trace


def encode_batch_backward(gy, trace, params, need_dx=False):
    """Backprop through the encoder. Returns (grads dict, dx or None)."""
    grads = {}
    g, gw, gb = ops.linear_backward(gy, trace.fc2_cache)
    grads["fc2.weights"], grads["fc2.bias"] = gw, gb
    g = ops.dropout_backward(g, trace.drop_keep)
    g = ops.relu_backward(g, trace.relu_fc_out, inplace=True)
    g, gw, gb = ops.linear_backward(g, trace.fc1_cache)
    grads["fc1.weights"], grads["fc1.bias"] = gw, gb
    g = g.reshape(trace.flat_shape)
    for i in range(len(params.convs) - 1, -1, -1):
        if trace.pool_caches[i] is not None:
            g = ops.maxpool_ceil_backward(g, trace.pool_caches[i])
        want_dx = need_dx or i > 0
        g, gk, gbias, ggamma, gbeta = _block_backward(
            g, trace.blocks[i], params.convs[i], params.bns[i], want_dx)
        grads[f"conv{i + 1}.kernels"], grads[f"conv{i + 1}.bias"] = gk, gbias
        grads[f"bn{i + 1}.gamma"], grads[f"bn{i + 1}.beta"] = ggamma, gbeta
    return grads, g if need_dx else None


def encode_patch(patch, params, mode="eval", rng=None):
    """Encode one (C, 32, 32) patch, with per-layer finite checks."""
    y, _ = encode_batch(patch[None], params, mode=mode, rng=rng, check_finite=True)
    return y[0]
