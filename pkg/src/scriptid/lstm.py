"""Two stacked peephole LSTM layers over the ordered patch-feature sequence.

Cell equations per step (sigma = logistic sigmoid, elementwise products):

    i = sigma(w_xi x + w_hi h' + w_ci * c' + b_i)
    f = sigma(w_xf x + w_hf h' + w_cf * c' + b_f)
    c = f * c' + i * tanh(w_xc x + w_hc h' + b_c)
    o = sigma(w_xo x + w_ho h' + w_co * c + b_o)    # peephole sees the NEW cell
    h = o * tanh(c)

where h', c' are the previous step's state. The cell-to-gate (peephole)
weights are diagonal, stored as vectors: element j of the cell only feeds
element j of each gate. Initial states are zero. Sequences in a batch may
have different lengths; a boolean mask freezes (h, c) past a sequence's end
so padded steps are exact no-ops.

For speed, the four gates' input projections are evaluated as one matmul over
the whole sequence before the time loop, and all weight gradients are single
matmuls over the stacked per-step gate deltas after the backward loop; only
the state recursion itself runs step by step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericFaultError
from .ops import sigmoid


@dataclass
class LstmLayerParams:
    w_xi: np.ndarray  # (hidden, input)
    w_xf: np.ndarray
    w_xc: np.ndarray
    w_xo: np.ndarray
    w_hi: np.ndarray  # (hidden, hidden)
    w_hf: np.ndarray
    w_hc: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray  # (hidden,) diagonal cell-to-gate weights
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray   # (hidden,)
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden(self):
        return self.w_hi.shape[0]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LayerTrace:
    x: np.ndarray      # (B, D, input)
    mask: np.ndarray   # (B, D) float 0/1
    i: np.ndarray      # (B, D, H) gate activations
    f: np.ndarray
    g: np.ndarray      # candidate tanh
    o: np.ndarray
    c_new: np.ndarray  # pre-mask cell values
    h_seq: np.ndarray  # (B, D, H) post-mask hidden values
    c_seq: np.ndarray  # (B, D, H) post-mask cell values


@dataclass
class SequenceOutput:
    hidden_per_step: np.ndarray  # (B, D, hidden) or (D, hidden) for one sample
    final_cell_top: np.ndarray   # (B, hidden) or (hidden,)
    traces: tuple = ()           # per-layer LayerTrace


def lstm_cell_step(x, prev, params):
    """One cell update for a single sample; a direct transcription of the
    equations above. Returns the new LstmState."""
    p = params
    i = sigmoid(p.w_xi @ x + p.w_hi @ prev.h + p.w_ci * prev.c + p.b_i)
    f = sigmoid(p.w_xf @ x + p.w_hf @ prev.h + p.w_cf * prev.c + p.b_f)
    c = f * prev.c + i * np.tanh(p.w_xc @ x + p.w_hc @ prev.h + p.b_c)
    o = sigmoid(p.w_xo @ x + p.w_ho @ prev.h + p.w_co * c + p.b_o)
    h = o * np.tanh(c)
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        raise NumericFaultError("lstm cell state")
    return LstmState(h=h, c=c)


def _cat_weights(p):
    wx = np.concatenate([p.w_xi, p.w_xf, p.w_xc, p.w_xo], axis=0)   # (4H, in)
    wh = np.concatenate([p.w_hi, p.w_hf, p.w_hc, p.w_ho], axis=0)   # (4H, H)
    bias = np.concatenate([p.b_i, p.b_f, p.b_c, p.b_o])
    return wx, wh, bias


def run_layer(x, params, mask):
    """Run one layer over (B, D, input) with (B, D) mask. Returns (trace, final c)."""
    b, d, _ = x.shape
    hd = params.hidden
    dt = x.dtype
    m = mask.astype(dt)
    wx, wh, bias = _cat_weights(params)
    px = x.reshape(b * d, -1) @ wx.T
    px += bias
    px = px.reshape(b, d, 4 * hd)
    h = np.zeros((b, hd), dtype=dt)
    c = np.zeros((b, hd), dtype=dt)
    stacks = {k: np.empty((b, d, hd), dtype=dt)
              for k in ("i", "f", "g", "o", "c_new", "c_seq")}
    h_seq = np.empty((b, d, hd), dtype=dt)
    for t in range(d):
        pre = px[:, t] + h @ wh.T
        i = sigmoid(pre[:, :hd] + c * params.w_ci)
        f = sigmoid(pre[:, hd : 2 * hd] + c * params.w_cf)
        g = np.tanh(pre[:, 2 * hd : 3 * hd])
        c_new = f * c + i * g
        o = sigmoid(pre[:, 3 * hd :] + c_new * params.w_co)
        h_new = o * np.tanh(c_new)
        mt = m[:, t, None]
        h = mt * h_new + (1 - mt) * h
        c = mt * c_new + (1 - mt) * c
        for k, v in (("i", i), ("f", f), ("g", g), ("o", o),
                     ("c_new", c_new), ("c_seq", c)):
            stacks[k][:, t] = v
        h_seq[:, t] = h
    trace = LayerTrace(x=x, mask=m, h_seq=h_seq, **stacks)
    return trace, c


def run_layer_backward(gh_seq, gc_final, trace, params, prefix):
    """BPTT through one layer. Returns (grads dict keyed by ``prefix.*``, dx)."""
    x, m = trace.x, trace.mask
    b, d, _ = x.shape
    hd = params.hidden
    dt = x.dtype
    wx, wh, _ = _cat_weights(params)
    dpre_all = np.zeros((b, d, 4 * hd), dtype=dt)
    dh = np.zeros((b, hd), dtype=dt)
    dc = np.zeros((b, hd), dtype=dt) + gc_final
    zeros = np.zeros((b, hd), dtype=dt)
    for t in range(d - 1, -1, -1):
        i, f, g, o = trace.i[:, t], trace.f[:, t], trace.g[:, t], trace.o[:, t]
        c_new = trace.c_new[:, t]
        c_prev = trace.c_seq[:, t - 1] if t > 0 else zeros
        mt = m[:, t, None]
        dh_t = dh + gh_seq[:, t]
        dh_new = dh_t * mt
        dc_new = dc * mt
        dh_pass = dh_t * (1 - mt)
        dc_pass = dc * (1 - mt)
        tanh_c = np.tanh(c_new)
        do = dh_new * tanh_c
        dc_new = dc_new + dh_new * o * (1 - tanh_c * tanh_c)
        dpre_o = do * o * (1 - o)
        dc_new = dc_new + dpre_o * params.w_co
        di = dc_new * g
        df = dc_new * c_prev
        dg = dc_new * i
        dc_prev = dc_new * f
        dpre = dpre_all[:, t]
        dpre[:, :hd] = di * i * (1 - i)
        dpre[:, hd : 2 * hd] = df * f * (1 - f)
        dpre[:, 2 * hd : 3 * hd] = dg * (1 - g * g)
        dpre[:, 3 * hd :] = dpre_o
        dc_prev = dc_prev + dpre[:, :hd] * params.w_ci + dpre[:, hd : 2 * hd] * params.w_cf
        dh = dpre @ wh + dh_pass
        dc = dc_prev + dc_pass
    flat = dpre_all.reshape(b * d, 4 * hd)
    h_prev_all = np.concatenate(
        [np.zeros((b, 1, hd), dtype=dt), trace.h_seq[:, :-1]], axis=1)
    c_prev_all = np.concatenate(
        [np.zeros((b, 1, hd), dtype=dt), trace.c_seq[:, :-1]], axis=1)
    dwx = flat.T @ x.reshape(b * d, -1)
    dwh = flat.T @ h_prev_all.reshape(b * d, hd)
    db = flat.sum(axis=0)
    dx = (flat @ wx).reshape(x.shape)
    grads = {}
    for k, tag in enumerate(("i", "f", "c", "o")):
        sl = slice(k * hd, (k + 1) * hd)
        grads[f"w_x{tag}"] = dwx[sl]
        grads[f"w_h{tag}"] = dwh[sl]
        grads[f"b_{tag}"] = db[sl]
    grads["w_ci"] = (dpre_all[..., :hd] * c_prev_all).sum(axis=(0, 1))
    grads["w_cf"] = (dpre_all[..., hd : 2 * hd] * c_prev_all).sum(axis=(0, 1))
    grads["w_co"] = (dpre_all[..., 3 * hd :] * trace.c_new).sum(axis=(0, 1))
    return {f"{prefix}.{k}": v for k, v in grads.items()}, dx


def run_stack(features, params1, params2, mask=None):
    """Run both layers over patch features.

    ``features`` is (D, input) for one sample or (B, D, input) for a batch;
    outputs match. Layer 2 consumes layer 1's hidden sequence; the returned
    final cell state is layer 2's.
    """
    single = features.ndim == 2
    x = features[None] if single else features
    b, d = x.shape[:2]
    if d < 1:
        raise InvalidInputError("sequence must contain at least one step")
    if mask is None:
        mask = np.ones((b, d), dtype=bool)
    elif single:
        mask = mask[None]
    if not mask[:, 0].all():
        raise InvalidInputError("every sequence must have at least its first step unmasked")
    t1, _ = run_layer(x, params1, mask)
    t2, c2 = run_layer(t1.h_seq, params2, mask)
    if single:
        return SequenceOutput(hidden_per_step=t2.h_seq[0], final_cell_top=c2[0],
                              traces=(t1, t2))
    return SequenceOutput(hidden_per_step=t2.h_seq, final_cell_top=c2, traces=(t1, t2))


def run_stack_backward(out, gh_seq, gc_final, params1, params2):
    """Full-sequence BPTT through both layers.

    ``gh_seq`` matches hidden_per_step's shape, ``gc_final`` final_cell_top's.
    Returns (grads dict with lstm1./lstm2. keys, gradient on the features).
    """
    t1, t2 = out.traces
    single = out.hidden_per_step.ndim == 2
    if single:
        gh_seq = gh_seq[None]
        gc_final = gc_final[None]
    g2, dh1 = run_layer_backward(gh_seq, gc_final, t2, params2, "lstm2")
    zero_c = np.zeros_like(gc_final)
    g1, dx = run_layer_backward(dh1, zero_c, t1, params1, "lstm1")
    g2.update(g1)
    return g2, dx[0] if single else dx
