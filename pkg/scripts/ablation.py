#!/usr/bin/env python3
"""Ablation study: full dynamic weighting vs the two concatenation variants.

Trains each wiring over several seeds on one synthetic corpus and prints
per-seed and median held-out accuracies, mirroring the improvement-analysis
table the architecture was motivated by.
"""

import argparse
import sys
import time
from pathlib import Path

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from scriptid.data import SynthSpec, build_patch_cache, generate_synthetic, split
from scriptid.model import ModelConfig
from scriptid.trainer import TrainConfig, evaluate, train

MID_ARCH = dict(conv_channels=(16, 32, 48, 64), fc1_dim=128, feature_dim=32,
                lstm_hidden=64, attn_dim=32, score_dim=32)

DESCRIPTIONS = {
    "variant1": "no attention + concatenation",
    "variant2": "attention + concatenation",
    "full": "attention + dynamic weighting",
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--iters", type=int, default=400)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--corpus-seed", type=int, default=23)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()

    numba.set_num_threads(args.threads)
    with threadpool_limits(limits=args.threads):
        spec = SynthSpec(n_classes=3, samples_per_class=args.per_class,
                         width_range=(36, 64), seed=args.corpus_seed)
        manifest = generate_synthetic(spec, Path(args.out) / "corpus")
        train_man, test_man = split(manifest, (0.8, 0.2), seed=1)
        print(f"corpus: {len(train_man)} train / {len(test_man)} test",
              file=sys.stderr)

        results = {}
        for variant in ("variant1", "variant2", "full"):
            accs = []
            for seed in range(args.seeds):
                cfg = TrainConfig(max_iterations=args.iters, seed=seed,
                                  variant=variant)
                mc = ModelConfig(n_classes=3, variant=variant, **MID_ARCH)
                t0 = time.perf_counter()
                res = train(train_man, cfg, model_config=mc)
                cache = build_patch_cache(test_man, res.channel_means,
                                          cfg.max_patches, cfg.seed,
                                          class_table=res.class_table)
                acc = evaluate(res.params, res.model_config, cache).accuracy
                accs.append(acc)
                print(f"  {variant} seed {seed}: {acc:.4f} "
                      f"({(time.perf_counter()-t0)/60:.1f} min)", file=sys.stderr)
            results[variant] = accs

        print(f"{'configuration':42s} {'per-seed accuracy':32s} median")
        for variant in ("variant1", "variant2", "full"):
            accs = results[variant]
            seeds = " ".join(f"{a:.3f}" for a in accs)
            print(f"{DESCRIPTIONS[variant]:42s} {seeds:32s} {np.median(accs):.4f}")


if __name__ == "__main__":
    main()
