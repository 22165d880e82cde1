"""Per-patch classification, attention-weighted aggregation, and the loss.

Each fused patch feature is mapped to class logits and softmaxed; the final
per-image distribution is the attention-weighted sum of the per-patch
distributions (a convex combination of probability vectors, so itself a
probability vector). The training loss is the batch-averaged negative
log-likelihood of that mixture plus an L2 penalty on the weight matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import InvalidInputError

LOG_CLAMP = 1e-12


@dataclass
class HeadParams:
    weights: np.ndarray  # (n_classes, in_dim)
    bias: np.ndarray     # (n_classes,)


def patch_distributions(phi, params):
    """Row-wise class distributions for (..., D, in_dim) fused features."""
    logits = phi @ params.weights.T + params.bias
    return ops.softmax(logits, axis=-1), (phi,)


def patch_distributions_backward(gdist, dist, cache, params):
    phi, = cache
    dlogits = ops.softmax_backward(gdist, dist, axis=-1)
    flat = dlogits.reshape(-1, dlogits.shape[-1])
    dw = flat.T @ phi.reshape(-1, phi.shape[-1])
    db = flat.sum(axis=0)
    return dlogits @ params.weights, {"weights": dw, "bias": db}


def aggregate(per_patch, p):
    """Attention-weighted mixture: z = sum_d p_d * dist_d over the patch axis."""
    return (p[..., None] * per_patch).sum(axis=-2)


def aggregate_backward(gz, per_patch, p):
    """Returns (d per_patch, d p)."""
    gdist = p[..., None] * np.expand_dims(gz, -2)
    gp = (per_patch * np.expand_dims(gz, -2)).sum(axis=-1)
    return gdist, gp


def nll_loss(z, labels):
    """Mean negative log-likelihood of the true class, z clamped at 1e-12."""
    z = np.atleast_2d(z)
    labels = np.atleast_1d(labels)
    n = z.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise InvalidInputError(f"label out of range for {n} classes")
    picked = np.clip(z[np.arange(len(labels)), labels], LOG_CLAMP, None)
    return float(-np.log(picked).mean())


def nll_loss_backward(z, labels):
    """Gradient of nll_loss w.r.t. z (zero where the clamp is active)."""
    z = np.atleast_2d(z)
    labels = np.atleast_1d(labels)
    gz = np.zeros_like(z)
    rows = np.arange(len(labels))
    picked = z[rows, labels]
    live = picked > LOG_CLAMP
    gz[rows[live], labels[live]] = -1.0 / (len(labels) * picked[live])
    return gz


def weight_penalty(weights):
    """Sum of squared entries over an iterable of weight tensors."""
    return float(sum(ops.squared_sum(w) for w in weights))


def loss(z, labels, lam=0.0, weights=()):
    """Full training loss: mean NLL plus lam * sum of squared weights."""
    if lam < 0:
        raise InvalidInputError("weight decay must be >= 0")
    total = nll_loss(z, labels)
    if lam > 0.0:
        total += lam * weight_penalty(weights)
    return total


def argmax_class(z):
    """Index of the largest probability; ties break to the lowest index."""
    return int(np.argmax(z))
