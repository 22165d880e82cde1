"""Shared test utilities: finite-difference checking and tiny model builders."""

import numpy as np

from scriptid.model import ModelConfig, init_params


def rel_error(a, b, atol=1e-9):
    d = abs(a - b)
    if d <= atol:
        return 0.0
    return d / max(abs(a), abs(b))


def fd_check(loss_fn, tensors, grads, rng, per_tensor=3, h_scale=1e-5, atol=1e-9):
    """Worst relative error between analytic grads and central differences.

    ``tensors`` is [(name, live array)]; ``grads`` maps name -> gradient.
    Perturbs sampled coordinates in place and restores them. When an estimate
    disagrees, the step is shrunk and retried: a relu/max kink inside the
    difference interval disappears with smaller h, a wrong gradient does not.
    """
    worst = 0.0
    worst_at = None
    for name, arr in tensors:
        k = min(per_tensor, arr.size)
        for idx in rng.choice(arr.size, size=k, replace=False):
            idx = int(idx)
            orig = arr.flat[idx]
            analytic = float(grads[name].flat[idx])
            best = np.inf
            for scale in (1.0, 1 / 8, 1 / 64):
                h = h_scale * scale * max(1.0, abs(orig))
                arr.flat[idx] = orig + h
                lp = loss_fn()
                arr.flat[idx] = orig - h
                lm = loss_fn()
                arr.flat[idx] = orig
                numeric = (lp - lm) / (2 * h)
                best = min(best, rel_error(analytic, numeric, atol=atol))
                if best < 1e-6:
                    break
            if best > worst:
                worst = best
                worst_at = (name, idx, analytic, numeric)
    return worst, worst_at


def tiny_params(n_classes=3, variant="full", seed=0, dtype=np.float64):
    config = ModelConfig.shrunken(n_classes=n_classes, variant=variant)
    params = init_params(config, np.random.default_rng(seed), dtype=dtype)
    return config, params


def random_patches(rng, d, channels=3, dtype=np.float64):
    return rng.normal(0.0, 0.5, (d, channels, 32, 32)).astype(dtype)
