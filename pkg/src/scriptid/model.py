"""Model assembly: configuration, parameters, and the end-to-end pass.

The full pipeline per image: encode each 32x32 patch to a feature vector,
run the ordered features through two stacked peephole LSTM layers, softmax
the attention scores of the hidden states into patch weights, build local
(attention-scaled) and global (projected final cell state) features, fuse
them per patch, classify each patch, and aggregate the per-patch
distributions with the attention weights.

Three wirings are supported:

* ``full``     - attention on, dynamic (coherence-weighted) fusion,
                 attention-weighted aggregation.
* ``variant1`` - attention off (uniform patch weights), fusion by
                 concatenation, uniform aggregation.
* ``variant2`` - attention on for the local features, fusion by
                 concatenation, uniform aggregation.

Batches hold images with different patch counts; sequences are padded to the
batch maximum and a boolean mask keeps padded slots out of every softmax,
sum, and statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import attention as attn
from . import fusion as fus
from . import head as hd
from .encoder import (BatchNormParams, ConvLayerParams, EncoderParams,
                      FcLayerParams, encode_batch, encode_batch_backward)
from .errors import InvalidInputError, ShapeError
from .fusion import BranchScorerParams, FusionParams
from .head import HeadParams
from .lstm import LstmLayerParams, run_stack, run_stack_backward

VARIANTS = ("full", "variant1", "variant2")

_CONV_SPECS = ((5, 1, 0), (3, 1, 0), (3, 1, 0), (1, 1, 0))  # (kernel, stride, pad)


@dataclass
class ModelConfig:
    n_classes: int
    channels: int = 3
    conv_channels: tuple = (96, 256, 384, 512)
    fc1_dim: int = 4096
    feature_dim: int = 256
    lstm_hidden: int = 512
    attn_dim: int = 256
    score_dim: int = 256
    dropout_rate: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        if self.n_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        self.conv_channels = tuple(self.conv_channels)

    @property
    def head_input_dim(self):
        # concatenation variants feed [local ; global] to the classifier
        return self.feature_dim if self.variant == "full" else 2 * self.feature_dim

    @property
    def flat_dim(self):
        return self.conv_channels[-1] * 3 * 3

    @classmethod
    def shrunken(cls, n_classes=3, variant="full"):
        """Narrow copy of the architecture for 64-bit gradient checking."""
        return cls(n_classes=n_classes, channels=3, conv_channels=(8, 16, 24, 32),
                   fc1_dim=8, feature_dim=8, lstm_hidden=8, attn_dim=8,
                   score_dim=8, dropout_rate=0.0, variant=variant)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class ModelParams:
    encoder: EncoderParams
    lstm1: LstmLayerParams
    lstm2: LstmLayerParams
    fusion: FusionParams
    head: HeadParams
    attention: attn.AttentionParams = None


def xavier_uniform(shape, fan_in, fan_out, rng, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _zeros(*shape, dtype):
    return np.zeros(shape, dtype=dtype)


def _init_lstm(input_dim, hidden, rng, dtype):
    def xmat():
        return xavier_uniform((hidden, input_dim), input_dim, hidden, rng, dtype)

    def hmat():
        return xavier_uniform((hidden, hidden), hidden, hidden, rng, dtype)

    return LstmLayerParams(
        w_xi=xmat(), w_xf=xmat(), w_xc=xmat(), w_xo=xmat(),
        w_hi=hmat(), w_hf=hmat(), w_hc=hmat(), w_ho=hmat(),
        w_ci=_zeros(hidden, dtype=dtype), w_cf=_zeros(hidden, dtype=dtype),
        w_co=_zeros(hidden, dtype=dtype),
        b_i=_zeros(hidden, dtype=dtype),
        # forget gate starts open so early gradients reach across steps
        b_f=np.ones(hidden, dtype=dtype),
        b_c=_zeros(hidden, dtype=dtype), b_o=_zeros(hidden, dtype=dtype))


def _init_scorer(feature_dim, score_dim, rng, dtype):
    return BranchScorerParams(
        w_in=xavier_uniform((score_dim, feature_dim), feature_dim, score_dim, rng, dtype),
        b_in=_zeros(score_dim, dtype=dtype),
        w_out=xavier_uniform((score_dim,), score_dim, 1, rng, dtype))


def init_params(config, rng, dtype=np.float32):
    """Build freshly initialized parameters for ``config``.

    Weight matrices and conv kernels draw Xavier-uniform values; biases are
    zero except the forget-gate bias (1.0); peepholes start at zero; batch
    norm starts at gamma=1, beta=0 with running stats (0, 1).
    """
    dtype = np.dtype(dtype)
    convs, bns = [], []
    in_ch = config.channels
    for out_ch, (k, stride, pad) in zip(config.conv_channels, _CONV_SPECS):
        convs.append(ConvLayerParams(
            kernels=xavier_uniform((out_ch, in_ch, k, k), in_ch * k * k,
                                   out_ch * k * k, rng, dtype),
            bias=_zeros(out_ch, dtype=dtype), stride=stride, pad=pad))
        bns.append(BatchNormParams(
            gamma=np.ones(out_ch, dtype=dtype), beta=_zeros(out_ch, dtype=dtype),
            running_mean=_zeros(out_ch, dtype=dtype),
            running_var=np.ones(out_ch, dtype=dtype)))
        in_ch = out_ch
    enc = EncoderParams(
        convs=convs, bns=bns,
        fc1=FcLayerParams(
            weights=xavier_uniform((config.fc1_dim, config.flat_dim),
                                   config.flat_dim, config.fc1_dim, rng, dtype),
            bias=_zeros(config.fc1_dim, dtype=dtype)),
        fc2=FcLayerParams(
            weights=xavier_uniform((config.feature_dim, config.fc1_dim),
                                   config.fc1_dim, config.feature_dim, rng, dtype),
            bias=_zeros(config.feature_dim, dtype=dtype)),
        dropout_rate=config.dropout_rate)
    lstm1 = _init_lstm(config.feature_dim, config.lstm_hidden, rng, dtype)
    lstm2 = _init_lstm(config.lstm_hidden, config.lstm_hidden, rng, dtype)
    attention = None
    if config.variant != "variant1":
        attention = attn.AttentionParams(
            w=xavier_uniform((config.attn_dim, config.lstm_hidden),
                             config.lstm_hidden, config.attn_dim, rng, dtype),
            b=_zeros(config.attn_dim, dtype=dtype),
            v=xavier_uniform((config.attn_dim,), config.attn_dim, 1, rng, dtype))
    fusion = FusionParams(
        proj_w=xavier_uniform((config.feature_dim, config.lstm_hidden),
                              config.lstm_hidden, config.feature_dim, rng, dtype),
        proj_b=_zeros(config.feature_dim, dtype=dtype))
    if config.variant == "full":
        fusion.local = _init_scorer(config.feature_dim, config.score_dim, rng, dtype)
        fusion.global_ = _init_scorer(config.feature_dim, config.score_dim, rng, dtype)
    h = HeadParams(
        weights=xavier_uniform((config.n_classes, config.head_input_dim),
                               config.head_input_dim, config.n_classes, rng, dtype),
        bias=_zeros(config.n_classes, dtype=dtype))
    return ModelParams(encoder=enc, lstm1=lstm1, lstm2=lstm2,
                       fusion=fusion, head=h, attention=attention)


_LSTM_FIELDS = ("w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho",
                "w_ci", "w_cf", "w_co", "b_i", "b_f", "b_c", "b_o")


def named_tensors(params):
    """All trainable tensors as (dotted name, array) pairs, stable order.

    The arrays are the live parameter storage, so in-place edits through this
    view update the model.
    """
    out = []
    e = params.encoder
    for i, (conv, bn) in enumerate(zip(e.convs, e.bns), 1):
        out.append((f"encoder.conv{i}.kernels", conv.kernels))
        out.append((f"encoder.conv{i}.bias", conv.bias))
        out.append((f"encoder.bn{i}.gamma", bn.gamma))
        out.append((f"encoder.bn{i}.beta", bn.beta))
    out.append(("encoder.fc1.weights", e.fc1.weights))
    out.append(("encoder.fc1.bias", e.fc1.bias))
    out.append(("encoder.fc2.weights", e.fc2.weights))
    out.append(("encoder.fc2.bias", e.fc2.bias))
    for tag in ("lstm1", "lstm2"):
        lp = getattr(params, tag)
        for name in _LSTM_FIELDS:
            out.append((f"{tag}.{name}", getattr(lp, name)))
    if params.attention is not None:
        out.append(("attention.w", params.attention.w))
        out.append(("attention.b", params.attention.b))
        out.append(("attention.v", params.attention.v))
    out.append(("fusion.proj_w", params.fusion.proj_w))
    out.append(("fusion.proj_b", params.fusion.proj_b))
    if params.fusion.local is not None:
        for tag, scorer in (("local", params.fusion.local), ("global", params.fusion.global_)):
            out.append((f"fusion.{tag}.w_in", scorer.w_in))
            out.append((f"fusion.{tag}.b_in", scorer.b_in))
            out.append((f"fusion.{tag}.w_out", scorer.w_out))
    out.append(("head.weights", params.head.weights))
    out.append(("head.bias", params.head.bias))
    return out


def state_tensors(params):
    """Non-trainable state (batch-norm running statistics)."""
    out = []
    for i, bn in enumerate(params.encoder.bns, 1):
        out.append((f"encoder.bn{i}.running_mean", bn.running_mean))
        out.append((f"encoder.bn{i}.running_var", bn.running_var))
    return out


def is_decayed_weight(name):
    """True for the multiplicative weights covered by the L2 penalty.

    Biases, peephole vectors, and batch-norm scale/shift are exempt.
    """
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("kernels", "weights", "proj_w", "w_in", "w_out", "w", "v"):
        return True
    return leaf.startswith("w_x") or leaf.startswith("w_h")


def decayed_weights(params):
    return [(n, a) for n, a in named_tensors(params) if is_decayed_weight(n)]


def count_parameters(params):
    return int(sum(a.size for _, a in named_tensors(params)))


def param_dtype(params):
    return params.head.weights.dtype


@dataclass
class BatchTrace:
    """Every intermediate of one batched forward pass, kept for backprop."""

    slices: list
    mask: np.ndarray          # (B, Dmax) bool
    features: np.ndarray      # (B, Dmax, F) padded encoder outputs
    enc_trace: object
    seq: object               # lstm SequenceOutput
    attn_cache: object
    p: np.ndarray             # (B, Dmax) patch weights used for local features
    agg_p: np.ndarray         # (B, Dmax) aggregation weights
    local: np.ndarray         # (B, Dmax, F)
    global_cache: object
    global_: np.ndarray       # (B, F)
    coh: np.ndarray           # (B, Dmax, 2) or None
    coh_cache: object
    fused: np.ndarray         # (B, Dmax, head_input_dim)
    per_patch: np.ndarray     # (B, Dmax, n_classes)
    head_cache: object
    z: np.ndarray             # (B, n_classes)


def _uniform_weights(mask, dtype):
    counts = mask.sum(axis=1, keepdims=True)
    return (mask / counts).astype(dtype)


def forward_batch(params, config, patch_seqs, mode="train", rng=None):
    """Run the whole network over a list of per-image patch arrays.

    ``patch_seqs`` is a list of (D_i, C, 32, 32) arrays. Patches of all
    images go through the encoder as one flat batch (so train-mode batch norm
    sees only real patches); sequences are then padded for the recurrence.
    """
    if not patch_seqs:
        raise InvalidInputError("empty batch")
    dtype = param_dtype(params)
    for a in patch_seqs:
        if a.ndim != 4 or a.shape[1] != config.channels:
            raise ShapeError(f"patch array shape {a.shape} does not match config")
        if a.shape[0] < 1:
            raise InvalidInputError("an image produced zero patches")
    flat = np.concatenate(patch_seqs, axis=0).astype(dtype, copy=False)
    slices, start = [], 0
    for a in patch_seqs:
        slices.append(slice(start, start + a.shape[0]))
        start += a.shape[0]
    y_flat, enc_trace = encode_batch(flat, params.encoder, mode=mode, rng=rng)

    b = len(patch_seqs)
    d_max = max(a.shape[0] for a in patch_seqs)
    feats = np.zeros((b, d_max, config.feature_dim), dtype=dtype)
    mask = np.zeros((b, d_max), dtype=bool)
    for i, sl in enumerate(slices):
        d = sl.stop - sl.start
        feats[i, :d] = y_flat[sl]
        mask[i, :d] = True

    seq = run_stack(feats, params.lstm1, params.lstm2, mask=mask)

    attn_cache = None
    if config.variant == "variant1":
        p = _uniform_weights(mask, dtype)
    else:
        q, attn_cache = attn.attention_scores(seq.hidden_per_step, params.attention)
        p = attn.attention_weights(q, mask=mask)
    agg_p = p if config.variant == "full" else _uniform_weights(mask, dtype)

    local = fus.local_features(p, feats)
    global_, gf_cache = fus.global_feature(seq.final_cell_top, params.fusion)

    coh = coh_cache = None
    if config.variant == "full":
        coh, coh_cache = fus.coherence_scores(local, global_, params.fusion)
        fused = fus.fuse(local, global_, coh)
    else:
        gf_tiled = np.broadcast_to(global_[:, None, :], local.shape)
        fused = np.concatenate([local, gf_tiled], axis=-1)

    per_patch, head_cache = hd.patch_distributions(fused, params.head)
    z = hd.aggregate(per_patch, agg_p)
    return BatchTrace(slices=slices, mask=mask, features=feats, enc_trace=enc_trace,
                      seq=seq, attn_cache=attn_cache, p=p, agg_p=agg_p, local=local,
                      global_cache=gf_cache, global_=global_, coh=coh,
                      coh_cache=coh_cache, fused=fused, per_patch=per_patch,
                      head_cache=head_cache, z=z)


def compute_loss(trace, labels, params, weight_decay=0.0):
    return hd.loss(trace.z, labels, lam=weight_decay,
                   weights=[a for _, a in decayed_weights(params)])


def backward_batch(trace, labels, params, config, weight_decay=0.0):
    """Gradient of the full (data + L2) loss for every trainable tensor."""
    gz = hd.nll_loss_backward(trace.z, labels).astype(param_dtype(params), copy=False)
    gdist, gagg = hd.aggregate_backward(gz, trace.per_patch, trace.agg_p)
    gphi, head_grads = hd.patch_distributions_backward(
        gdist, trace.per_patch, trace.head_cache, params.head)
    grads = {f"head.{k}": v for k, v in head_grads.items()}

    f_dim = config.feature_dim
    gp = np.zeros_like(trace.p)
    if config.variant == "full":
        gp += gagg
        glocal, gglobal, gcoh = fus.fuse_backward(gphi, trace.local, trace.global_, trace.coh)
        dlf, dgf, fgrads = fus.coherence_scores_backward(gcoh, trace.coh_cache, params.fusion)
        glocal += dlf
        gglobal += dgf
        grads.update({f"fusion.{k}": v for k, v in fgrads.items()})
    else:
        glocal = gphi[..., :f_dim]
        gglobal = gphi[..., f_dim:].sum(axis=-2)

    gp_lf, gfeats = fus.local_features_backward(glocal, trace.p, trace.features)
    gp += gp_lf
    gcell, pgrads = fus.global_feature_backward(gglobal, trace.global_cache, params.fusion)
    grads.update({f"fusion.{k}": v for k, v in pgrads.items()})

    if config.variant == "variant1":
        gh_seq = np.zeros_like(trace.seq.hidden_per_step)
    else:
        gq = attn.attention_weights_backward(gp, trace.p)
        gh_seq, agrads = attn.attention_scores_backward(gq, trace.attn_cache, params.attention)
        grads.update({f"attention.{k}": v for k, v in agrads.items()})

    lstm_grads, dfeats = run_stack_backward(trace.seq, gh_seq, gcell,
                                            params.lstm1, params.lstm2)
    grads.update(lstm_grads)
    gfeats = gfeats + dfeats

    gy_flat = np.concatenate(
        [gfeats[i, : sl.stop - sl.start] for i, sl in enumerate(trace.slices)], axis=0)
    enc_grads, _ = encode_batch_backward(gy_flat, trace.enc_trace, params.encoder)
    grads.update({f"encoder.{k}": v for k, v in enc_grads.items()})

    if weight_decay > 0.0:
        for name, w in decayed_weights(params):
            grads[name] = grads[name] + 2.0 * weight_decay * w
    return grads


@dataclass
class SampleTrace:
    """Per-image activations for inspection and rendering."""

    features: np.ndarray      # (D, F)
    hidden: np.ndarray        # (D, hidden)
    p: np.ndarray             # (D,) patch weights
    local: np.ndarray         # (D, F)
    global_: np.ndarray       # (F,)
    coherence: np.ndarray     # (D, 2) or None
    fused: np.ndarray         # (D, head_input_dim)
    per_patch: np.ndarray     # (D, n_classes)
    z: np.ndarray             # (n_classes,)


def forward_image(params, config, patches, mode="eval", rng=None):
    """Single-image forward pass returning a SampleTrace."""
    t = forward_batch(params, config, [patches], mode=mode, rng=rng)
    return SampleTrace(features=t.features[0], hidden=t.seq.hidden_per_step[0],
                       p=t.p[0], local=t.local[0], global_=t.global_[0],
                       coherence=None if t.coh is None else t.coh[0],
                       fused=t.fused[0], per_patch=t.per_patch[0], z=t.z[0])
