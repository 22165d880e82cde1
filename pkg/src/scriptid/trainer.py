"""End-to-end optimization: Adam updates, gradient clipping, training loop,
evaluation, and finite-difference gradient checking.

Training is deterministic given (seed, single BLAS thread): batch order,
initialization, dropout, and patch capping all derive from the seed, and
gradient reduction follows a fixed tensor order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import data as data_mod
from . import kernels
from . import model as model_mod
from . import ops
from .errors import InvalidInputError, NumericFaultError
from .model import ModelConfig, backward_batch, compute_loss, forward_batch, init_params
from .patches import cap_patches, extract_patches


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_iterations: int = 20000
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    max_patches: int = 100
    seed: int = 0
    variant: str = "full"
    dtype: str = "float32"
    augment: bool = False
    eval_every: int = 0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params):
    m = {n: np.zeros_like(a) for n, a in model_mod.named_tensors(params)}
    v = {n: np.zeros_like(a) for n, a in model_mod.named_tensors(params)}
    return AdamState(m=m, v=v)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, applied in place in fixed name order."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    tensors = dict(model_mod.named_tensors(params))
    for name in sorted(tensors):
        g = np.ascontiguousarray(grads[name])
        kernels.adam_update(tensors[name].reshape(-1), g.reshape(-1),
                            state.m[name].reshape(-1), state.v[name].reshape(-1),
                            state.beta1, state.beta2, state.eps, c1, c2, lr)
    return params


def global_norm(grads):
    total = 0.0
    for name in sorted(grads):
        total += ops.squared_sum(grads[name])
    return float(np.sqrt(total))


def clip_gradients(grads, clip_norm):
    """Scale all gradients by clip_norm/norm when the global L2 norm exceeds it."""
    if clip_norm <= 0:
        raise InvalidInputError("clip_norm must be > 0")
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return grads
    scale = clip_norm / norm
    return {n: g * scale for n, g in grads.items()}


def first_nonfinite_tensor(named_arrays):
    for name, a in named_arrays:
        if a is not None and not np.isfinite(a).all():
            return name
    return None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _IndexStream:
    """Endless stream of sample indices: reshuffled epochs of the dataset."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def _augment_patches(norm_img, n_max, rng):
    """Brightness jitter (+/-10%) and sub-pixel horizontal shift (+/-2 px)."""
    img = norm_img * (1.0 + rng.uniform(-0.1, 0.1))
    shift = rng.uniform(-2.0, 2.0)
    w = img.shape[1]
    xs = np.clip(np.arange(w) + shift, 0, w - 1)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    frac = (xs - x0)[None, :, None]
    img = img[:, x0] * (1 - frac) + img[:, x1] * frac
    seq = extract_patches(img.astype(np.float32))
    return cap_patches(seq, n_max, rng).patches


@dataclass
class TrainResult:
    params: object
    model_config: ModelConfig
    train_config: TrainConfig
    channel_means: np.ndarray
    class_table: list
    metrics: list
    adam: AdamState
    iterations: int


def train(manifest, config, model_config=None, eval_manifest=None,
          metrics_path=None, log=None):
    """Optimize a fresh model on ``manifest``; returns a TrainResult.

    ``model_config`` overrides the architecture (defaults to the full-size
    stack); its class count and variant are forced to match the data and
    ``config.variant``. Metrics lines (iteration, loss, periodic accuracy)
    go to ``metrics_path`` if given and are also returned.
    """
    if len(manifest.records) == 0:
        raise InvalidInputError("training manifest is empty")
    if len(manifest.class_table) < 2:
        raise InvalidInputError("need at least 2 classes to train")
    if model_config is None:
        model_config = ModelConfig(n_classes=len(manifest.class_table),
                                   variant=config.variant)
    else:
        model_config = ModelConfig.from_dict(
            dict(model_config.to_dict(), n_classes=len(manifest.class_table),
                 variant=config.variant))
    dtype = np.dtype(config.dtype)

    channel_means = data_mod.compute_channel_means(manifest, model_config.channels)
    cache = data_mod.build_patch_cache(manifest, channel_means, config.max_patches,
                                       config.seed, model_config.channels)
    norm_images = None
    if config.augment:
        norm_images = data_mod.load_normalized_images(manifest, channel_means,
                                                      model_config.channels)
    eval_cache = None
    if eval_manifest is not None:
        eval_cache = data_mod.build_patch_cache(
            eval_manifest, channel_means, config.max_patches, config.seed,
            model_config.channels, class_table=manifest.class_table)

    init_rng = np.random.default_rng([config.seed, 0])
    batch_rng = np.random.default_rng([config.seed, 1])
    fwd_rng = np.random.default_rng([config.seed, 2])
    params = init_params(model_config, init_rng, dtype=dtype)
    adam = adam_init(params)
    stream = _IndexStream(len(cache), batch_rng)

    metrics = []
    out_file = open(metrics_path, "w") if metrics_path else None

    def emit(line):
        metrics.append(line)
        if out_file:
            out_file.write(line + "\n")
        if log:
            print(line, file=log)

    try:
        for it in range(1, config.max_iterations + 1):
            idxs = stream.take(config.batch_size)
            if config.augment:
                batch = [_augment_patches(norm_images[i], config.max_patches, fwd_rng)
                         for i in idxs]
            else:
                batch = [cache[i][0] for i in idxs]
            labels = np.array([cache[i][1] for i in idxs])
            trace = forward_batch(params, model_config, batch, mode="train", rng=fwd_rng)
            loss = compute_loss(trace, labels, params, config.weight_decay)
            if not np.isfinite(loss):
                culprit = first_nonfinite_tensor(
                    model_mod.named_tensors(params)
                    + [("features", trace.features), ("z", trace.z)]) or "loss"
                raise NumericFaultError(culprit,
                                        f"non-finite loss at iteration {it} ({culprit})")
            grads = backward_batch(trace, labels, params, model_config,
                                   config.weight_decay)
            grads = clip_gradients(grads, config.clip_norm)
            adam_step(params, grads, adam, config.learning_rate)
            line = f"iteration={it} loss={loss:.6f}"
            if config.eval_every and it % config.eval_every == 0:
                acc = evaluate(params, model_config, eval_cache or cache).accuracy
                line += f" accuracy={acc:.4f}"
            emit(line)
    finally:
        if out_file:
            out_file.close()
    return TrainResult(params=params, model_config=model_config, train_config=config,
                       channel_means=channel_means, class_table=list(manifest.class_table),
                       metrics=metrics, adam=adam, iterations=config.max_iterations)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray     # (n,) recall per true class
    confusion: np.ndarray     # (n, n) rows = truth, columns = prediction
    n_samples: int


def evaluate(params, model_config, samples, batch_size=32):
    """Top-1 accuracy and confusion matrix over (patches, label) samples."""
    n = model_config.n_classes
    confusion = np.zeros((n, n), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        trace = forward_batch(params, model_config, [c[0] for c in chunk], mode="eval")
        preds = np.argmax(trace.z, axis=1)
        for (_, label), pred in zip(chunk, preds):
            confusion[label, pred] += 1
    correct = np.trace(confusion)
    totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), 0.0)
    return EvalResult(accuracy=float(correct / max(len(samples), 1)),
                      per_class=per_class, confusion=confusion,
                      n_samples=len(samples))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    n_checked: int
    max_rel_error: float
    tolerance: float
    worst: list = field(default_factory=list)  # (tensor, flat index, analytic, numeric, rel)

    def lines(self):
        out = [f"gradcheck {'PASS' if self.passed else 'FAIL'} "
               f"checked={self.n_checked} max_rel_error={self.max_rel_error:.3e} "
               f"tolerance={self.tolerance:.0e}"]
        for name, idx, an, nu, rel in self.worst:
            out.append(f"  {name}[{idx}] analytic={an:.6e} numeric={nu:.6e} rel={rel:.3e}")
        return out


def _rel_error(a, b, atol=1e-9):
    d = abs(a - b)
    if d <= atol:
        return 0.0
    return d / max(abs(a), abs(b))


def gradient_check(seed=0, n_samples=200, rtol=1e-3, variant="full",
                   weight_decay=5e-4, n_classes=3, d_patches=3):
    """Compare analytic and central-difference gradients on a shrunken model.

    Runs in float64 with dropout off and batch norm in eval mode. Samples at
    least ``n_samples`` coordinates spread over every tensor.
    """
    rng = np.random.default_rng(seed)
    config = ModelConfig.shrunken(n_classes=n_classes, variant=variant)
    params = init_params(config, rng, dtype=np.float64)
    for bn in params.encoder.bns:
        bn.running_mean[:] = rng.normal(0, 0.1, bn.running_mean.shape)
        bn.running_var[:] = rng.uniform(0.5, 1.5, bn.running_var.shape)
    batch = [rng.normal(0, 0.5, (d_patches, config.channels, 32, 32)),
             rng.normal(0, 0.5, (max(d_patches - 1, 1), config.channels, 32, 32))]
    labels = rng.integers(0, n_classes, size=len(batch))

    def loss_value():
        trace = forward_batch(params, config, batch, mode="eval")
        return compute_loss(trace, labels, params, weight_decay)

    trace = forward_batch(params, config, batch, mode="eval")
    grads = backward_batch(trace, labels, params, config, weight_decay)

    tensors = model_mod.named_tensors(params)
    per_tensor = -(-n_samples // len(tensors))
    results = []
    for name, arr in tensors:
        k = min(per_tensor, arr.size)
        for idx in rng.choice(arr.size, size=k, replace=False):
            idx = int(idx)
            orig = arr.flat[idx]
            analytic = float(grads[name].flat[idx])
            best = np.inf
            numeric = np.nan
            # shrink-and-retry separates relu/max kinks inside the interval
            # (which vanish with h) from genuinely wrong gradients
            for scale in (1.0, 1 / 8, 1 / 64):
                h = 1e-5 * scale * max(1.0, abs(orig))
                arr.flat[idx] = orig + h
                lp = loss_value()
                arr.flat[idx] = orig - h
                lm = loss_value()
                arr.flat[idx] = orig
                est = (lp - lm) / (2 * h)
                r = _rel_error(analytic, est)
                if r < best:
                    best, numeric = r, est
                if best < 1e-6:
                    break
            results.append((name, idx, analytic, numeric, best))
    results.sort(key=lambda r: -r[4])
    max_rel = results[0][4] if results else 0.0
    return GradCheckReport(passed=max_rel <= rtol, n_checked=len(results),
                           max_rel_error=max_rel, tolerance=rtol,
                           worst=results[:5])
