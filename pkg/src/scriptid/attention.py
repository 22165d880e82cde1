"""Per-patch attention over the recurrent hidden states.

Each hidden vector h_d is scored with a one-hidden-layer scorer
``q_d = v . tanh(W h_d + b)`` and the scores are softmax-normalized into a
weight distribution over the patches of one image. Padded batch slots are
excluded from the normalizer entirely and come back as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops


@dataclass
class AttentionParams:
    w: np.ndarray  # (attn_dim, hidden)
    b: np.ndarray  # (attn_dim,)
    v: np.ndarray  # (attn_dim,)


def attention_scores(hidden, params):
    """Scores for (..., D, hidden) -> (..., D), plus a cache for backward."""
    a = np.tanh(hidden @ params.w.T + params.b)
    q = a @ params.v
    return q, (hidden, a)


def attention_scores_backward(gq, cache, params):
    hidden, a = cache
    dv = (a * gq[..., None]).reshape(-1, a.shape[-1]).sum(axis=0)
    dpre = gq[..., None] * params.v * (1 - a * a)
    flat = dpre.reshape(-1, dpre.shape[-1])
    dw = flat.T @ hidden.reshape(-1, hidden.shape[-1])
    db = flat.sum(axis=0)
    dhidden = dpre @ params.w
    return dhidden, {"w": dw, "b": db, "v": dv}


def attention_weights(scores, mask=None):
    """Normalize scores into per-patch probabilities over the last axis."""
    return ops.softmax(scores, mask=mask, axis=-1)


def attention_weights_backward(gp, p):
    return ops.softmax_backward(gp, p, axis=-1)
