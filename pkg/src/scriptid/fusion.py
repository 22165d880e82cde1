"""Local/global feature construction and their dynamic per-patch fusion.

Local features scale each patch's encoder feature by its attention weight.
The global feature projects the final top-layer cell state (512-dim) down to
the feature width through a learned tanh affine map, giving one vector per
image. Each branch is scored by its own one-hidden-layer scorer; a two-way
softmax over the branch scores yields coherence weights that convexly mix the
local and global vectors per patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops


@dataclass
class BranchScorerParams:
    w_in: np.ndarray   # (score_dim, feature_dim)
    b_in: np.ndarray   # (score_dim,)
    w_out: np.ndarray  # (score_dim,)


@dataclass
class FusionParams:
    proj_w: np.ndarray  # (feature_dim, hidden) cell-state projection
    proj_b: np.ndarray  # (feature_dim,)
    local: BranchScorerParams = None    # absent in concatenation variants
    global_: BranchScorerParams = None


def local_features(p, features):
    """Scale feature rows by their attention weights: Lf_d = p_d * Y_d."""
    return p[..., None] * features


def local_features_backward(g, p, features):
    return (g * features).sum(axis=-1), p[..., None] * g


def global_feature(final_cell, params):
    """Project the final cell state to one per-image feature vector."""
    gf = np.tanh(final_cell @ params.proj_w.T + params.proj_b)
    return gf, (final_cell, gf)


def global_feature_backward(ggf, cache, params):
    final_cell, gf = cache
    dpre = ggf * (1 - gf * gf)
    flat = dpre.reshape(-1, dpre.shape[-1])
    dw = flat.T @ final_cell.reshape(-1, final_cell.shape[-1])
    db = flat.sum(axis=0)
    dcell = dpre @ params.proj_w
    return dcell, {"proj_w": dw, "proj_b": db}


def _branch_score(f, scorer):
    a = np.tanh(f @ scorer.w_in.T + scorer.b_in)
    return a @ scorer.w_out, a


def _branch_score_backward(gv, f, a, scorer):
    dw_out = (a * gv[..., None]).reshape(-1, a.shape[-1]).sum(axis=0)
    dpre = gv[..., None] * scorer.w_out * (1 - a * a)
    flat = dpre.reshape(-1, dpre.shape[-1])
    dw_in = flat.T @ f.reshape(-1, f.shape[-1])
    db_in = flat.sum(axis=0)
    return dpre @ scorer.w_in, {"w_in": dw_in, "b_in": db_in, "w_out": dw_out}


def coherence_scores(local_f, global_f, params):
    """Two-way softmax over the branch scores.

    ``local_f`` is (..., D, F); ``global_f`` is (..., F), one per image,
    shared by all its patches. Returns (c stacked on the last axis as
    (..., D, 2), cache).
    """
    v_local, a_local = _branch_score(local_f, params.local)
    v_global, a_global = _branch_score(global_f, params.global_)
    v_global_b = np.broadcast_to(np.expand_dims(v_global, -1), v_local.shape)
    v = np.stack([v_local, v_global_b], axis=-1)
    c = ops.softmax(v, axis=-1)
    cache = (local_f, a_local, global_f, a_global, c)
    return c, cache


def coherence_scores_backward(gc, cache, params):
    """Returns (dlocal_f, dglobal_f, param grads dict)."""
    local_f, a_local, global_f, a_global, c = cache
    dv = ops.softmax_backward(gc, c, axis=-1)
    dlf, glocal = _branch_score_backward(dv[..., 0], local_f, a_local, params.local)
    # the global score is broadcast across patches; fold those slots back
    dv_global = dv[..., 1].sum(axis=-1)
    dgf, gglobal = _branch_score_backward(dv_global, global_f, a_global, params.global_)
    grads = {f"local.{k}": v for k, v in glocal.items()}
    grads.update({f"global.{k}": v for k, v in gglobal.items()})
    return dlf, dgf, grads


def fuse(local_f, global_f, c):
    """Convex per-patch mix: phi_d = c_local * Lf_d + c_global * Gf."""
    return c[..., 0:1] * local_f + c[..., 1:2] * np.expand_dims(global_f, -2)


def fuse_backward(gphi, local_f, global_f, c):
    """Returns (dlocal_f, dglobal_f, dc)."""
    gf_b = np.expand_dims(global_f, -2)
    dc = np.stack([(gphi * local_f).sum(axis=-1), (gphi * gf_b).sum(axis=-1)], axis=-1)
    dlf = c[..., 0:1] * gphi
    dgf = (c[..., 1:2] * gphi).sum(axis=-2)
    return dlf, dgf, dc
