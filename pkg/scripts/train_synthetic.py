#!/usr/bin/env python3
"""End-to-end desk-scale experiment on a synthetic corpus.

Generates a corpus, trains the chosen variant, reports held-out accuracy and
the confusion matrix, saves a checkpoint, and renders one attention map.
"""

import argparse
import sys
import time
from pathlib import Path

import numba
from threadpoolctl import threadpool_limits

from scriptid import checkpoint as ckpt
from scriptid.cli import render_attention_map
from scriptid.data import SynthSpec, build_patch_cache, generate_synthetic, split
from scriptid.model import ModelConfig, forward_image
from scriptid.patches import load_image, patch_sequence_from_file, prepare_image
from scriptid.trainer import TrainConfig, evaluate, train

MID_ARCH = dict(conv_channels=(16, 32, 48, 64), fc1_dim=128, feature_dim=32,
                lstm_hidden=64, attn_dim=32, score_dim=32)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic", help="working directory")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="full",
                    choices=("full", "variant1", "variant2"))
    ap.add_argument("--arch", default="mid", choices=("mid", "paper"),
                    help="mid = narrow fast stack, paper = full-size stack")
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()

    out = Path(args.out)
    numba.set_num_threads(args.threads)
    with threadpool_limits(limits=args.threads):
        spec = SynthSpec(n_classes=3, samples_per_class=args.per_class,
                         width_range=(36, 64), seed=args.seed)
        manifest = generate_synthetic(spec, out / "corpus")
        train_man, test_man = split(manifest, (0.8, 0.2), seed=1)
        print(f"corpus: {len(train_man)} train / {len(test_man)} test", file=sys.stderr)

        cfg = TrainConfig(max_iterations=args.iters, seed=args.seed,
                          variant=args.variant, eval_every=max(args.iters // 5, 1))
        model_config = None
        if args.arch == "mid":
            model_config = ModelConfig(n_classes=3, variant=args.variant, **MID_ARCH)
        t0 = time.perf_counter()
        res = train(train_man, cfg, model_config=model_config,
                    eval_manifest=test_man, metrics_path=out / "metrics.log",
                    log=sys.stderr)
        print(f"trained {args.iters} iters in {(time.perf_counter()-t0)/60:.1f} min",
              file=sys.stderr)

        cache = build_patch_cache(test_man, res.channel_means, cfg.max_patches,
                                  cfg.seed, class_table=res.class_table)
        ev = evaluate(res.params, res.model_config, cache)
        print(f"held-out accuracy: {ev.accuracy:.4f}")
        print("confusion (rows = truth):")
        for i, name in enumerate(res.class_table):
            print(f"  {name}: {ev.confusion[i].tolist()}")

        ck = out / "model.sidn"
        ckpt.save(ck, res.params, res.model_config, cfg, res.class_table,
                  res.channel_means, iteration=res.iterations)
        print(f"checkpoint: {ck}")

        # render one attention map from the test set
        img_path = test_man.path(0)
        seq = patch_sequence_from_file(img_path, res.channel_means,
                                       cfg.max_patches, cfg.seed)
        trace = forward_image(res.params, res.model_config, seq.patches)
        norm = prepare_image(load_image(img_path), res.channel_means)
        heat = render_attention_map(trace.p, seq.origins, norm.shape)
        from PIL import Image

        Image.fromarray(heat, mode="L").save(out / "attention_map.png")
        print(f"attention map: {out / 'attention_map.png'}")


if __name__ == "__main__":
    main()
