"""Command-line interface.

Subcommands: synth-data, train, eval, predict, attn-map, gradcheck.
Machine-readable results go to stdout (tab-separated, one record per line);
progress and diagnostics go to stderr. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric fault.

A flat ``key=value`` config file may supply any training option; explicit
flags win over file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import trainer as trainer_mod
from .errors import (CheckpointError, DataError, InvalidInputError,
                     NumericFaultError, ScriptIdError)
from .model import ModelConfig, forward_image
from .patches import PATCH_SIZE, load_image, patch_sequence_from_file, prepare_image

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def render_attention_map(p, origins, image_shape):
    """Grayscale heat map of patch weights over the normalized image.

    Each pixel takes the maximum weight of any covering patch, scaled so the
    strongest patch is white (255); uncovered pixels are black.
    """
    h, w = image_shape[:2]
    heat = np.zeros((h, w), dtype=np.float64)
    for weight, (x, y) in zip(p, origins):
        region = heat[y : y + PATCH_SIZE, x : x + PATCH_SIZE]
        np.maximum(region, weight, out=region)
    top = heat.max()
    if top > 0:
        heat /= top
    return np.round(heat * 255).astype(np.uint8)


def _config_file_values(path):
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_TRAIN_KEYS = {
    "learning_rate": float, "batch_size": int, "iterations": int,
    "weight_decay": float, "clip_norm": float, "max_patches": int,
    "variant": str, "augment": lambda s: s.lower() in ("1", "true", "yes"),
    "eval_every": int, "seed": int, "threads": int, "channels": int,
}


def _build_parser():
    ap = argparse.ArgumentParser(prog="scriptid", description=__doc__)
    ap.add_argument("--config", help="flat key=value config file")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread cap (default 1, for reproducibility)")
    sub = ap.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="generate a synthetic corpus")
    sd.add_argument("--out", required=True)
    sd.add_argument("--classes", type=int, default=3)
    sd.add_argument("--per-class", type=int, default=10)
    sd.add_argument("--width-range", type=int, nargs=2, default=[60, 300])
    sd.add_argument("--height-range", type=int, nargs=2, default=[30, 60])
    sd.add_argument("--noise", type=float, default=10.0)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--val-manifest")
    tr.add_argument("--out", required=True)
    tr.add_argument("--metrics")
    tr.add_argument("--classes", type=int, default=None,
                    help="expected class count (checked against the manifest)")
    tr.add_argument("--iters", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--weight-decay", type=float, default=None)
    tr.add_argument("--clip-norm", type=float, default=None)
    tr.add_argument("--max-patches", type=int, default=None)
    tr.add_argument("--variant", choices=("full", "variant1", "variant2"), default=None)
    tr.add_argument("--channels", type=int, choices=(1, 3), default=None)
    tr.add_argument("--augment", action="store_true", default=None)
    tr.add_argument("--eval-every", type=int, default=None)
    tr.add_argument("--save-optimizer", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--model", required=True)
    ev.add_argument("--manifest", required=True)

    pr = sub.add_parser("predict", help="classify one image")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--per-patch", action="store_true")

    am = sub.add_parser("attn-map", help="export the attention heat map")
    am.add_argument("--model", required=True)
    am.add_argument("--image", required=True)
    am.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--samples", type=int, default=200)
    gc.add_argument("--rtol", type=float, default=1e-3)
    gc.add_argument("--variant", choices=("full", "variant1", "variant2"),
                    default="full")
    return ap


def _resolve(args, cfg, flag_value, key, default):
    if flag_value is not None:
        return flag_value
    if key in cfg:
        return _TRAIN_KEYS[key](cfg[key])
    return default


def _load_model(path):
    params, _, meta = ckpt.load(path)
    config = ModelConfig.from_dict(meta["model_config"])
    means = np.asarray(meta["channel_means"], dtype=np.float32)
    return params, config, meta["class_table"], means, meta


def _cmd_synth_data(args, cfg, seed):
    spec = data_mod.SynthSpec(n_classes=args.classes, samples_per_class=args.per_class,
                              width_range=tuple(args.width_range),
                              height_range=tuple(args.height_range),
                              noise_level=args.noise, seed=seed)
    manifest = data_mod.generate_synthetic(spec, args.out)
    print(f"manifest\t{Path(args.out) / 'manifest.tsv'}")
    print(f"images\t{len(manifest)}")
    return EXIT_OK


def _cmd_train(args, cfg, seed):
    manifest = data_mod.load_manifest(args.manifest)
    if args.classes is not None and len(manifest.class_table) != args.classes:
        raise DataError(f"manifest has {len(manifest.class_table)} classes, "
                        f"expected {args.classes}")
    tc = trainer_mod.TrainConfig(
        learning_rate=_resolve(args, cfg, args.lr, "learning_rate", 1e-3),
        batch_size=_resolve(args, cfg, args.batch_size, "batch_size", 32),
        max_iterations=_resolve(args, cfg, args.iters, "iterations", 20000),
        weight_decay=_resolve(args, cfg, args.weight_decay, "weight_decay", 5e-4),
        clip_norm=_resolve(args, cfg, args.clip_norm, "clip_norm", 5.0),
        max_patches=_resolve(args, cfg, args.max_patches, "max_patches", 100),
        seed=seed,
        variant=_resolve(args, cfg, args.variant, "variant", "full"),
        augment=bool(_resolve(args, cfg, args.augment, "augment", False)),
        eval_every=_resolve(args, cfg, args.eval_every, "eval_every", 0),
    )
    channels = _resolve(args, cfg, args.channels, "channels", 3)
    model_config = ModelConfig(n_classes=len(manifest.class_table),
                               channels=channels, variant=tc.variant)
    eval_manifest = data_mod.load_manifest(args.val_manifest) if args.val_manifest else None
    result = trainer_mod.train(manifest, tc, model_config=model_config,
                               eval_manifest=eval_manifest,
                               metrics_path=args.metrics, log=sys.stderr)
    ckpt.save(args.out, result.params, result.model_config, tc, result.class_table,
              result.channel_means, iteration=result.iterations,
              adam_state=result.adam if args.save_optimizer else None)
    print(f"checkpoint\t{args.out}")
    final_loss = result.metrics[-1].split("loss=")[1].split()[0]
    print(f"final_loss\t{final_loss}")
    if eval_manifest is not None:
        cache = data_mod.build_patch_cache(eval_manifest, result.channel_means,
                                           tc.max_patches, tc.seed, channels,
                                           class_table=result.class_table)
        acc = trainer_mod.evaluate(result.params, result.model_config, cache).accuracy
        print(f"val_accuracy\t{acc:.4f}")
    return EXIT_OK


def _cmd_eval(args, cfg, seed):
    params, config, class_table, means, meta = _load_model(args.model)
    manifest = data_mod.load_manifest(args.manifest)
    for label in manifest.class_table:
        if label not in class_table:
            raise DataError(f"manifest label {label!r} unknown to the checkpoint")
    tc = ckpt.load_train_config(meta)
    cache = data_mod.build_patch_cache(manifest, means, tc.max_patches, tc.seed,
                                       config.channels, class_table=class_table)
    res = trainer_mod.evaluate(params, config, cache)
    print(f"accuracy\t{res.accuracy:.4f}")
    for i, name in enumerate(class_table):
        print(f"class\t{name}\t{res.per_class[i]:.4f}\t{int(res.confusion[i].sum())}")
    for i, name in enumerate(class_table):
        row = ",".join(str(int(x)) for x in res.confusion[i])
        print(f"confusion\t{name}\t{row}")
    return EXIT_OK


def _predict_one(args, seed):
    params, config, class_table, means, meta = _load_model(args.model)
    tc = ckpt.load_train_config(meta)
    seq = patch_sequence_from_file(args.image, means, tc.max_patches, tc.seed,
                                   config.channels)
    trace = forward_image(params, config, seq.patches)
    return params, config, class_table, means, seq, trace


def _cmd_predict(args, cfg, seed):
    _, _, class_table, _, seq, trace = _predict_one(args, seed)
    zs = ",".join(f"{v:.6f}" for v in trace.z)
    print(f"{args.image}\t{class_table[int(np.argmax(trace.z))]}\t{zs}")
    if args.per_patch:
        for d in range(seq.count):
            probs = ",".join(f"{v:.6f}" for v in trace.per_patch[d])
            x, y = seq.origins[d]
            print(f"patch\t{d}\t{x},{y}\t{probs}")
    return EXIT_OK


def _cmd_attn_map(args, cfg, seed):
    from PIL import Image

    params, config, class_table, means, meta = _load_model(args.model)
    raw = load_image(args.image, channels=config.channels)
    norm = prepare_image(raw, means)
    tc = ckpt.load_train_config(meta)
    seq = patch_sequence_from_file(args.image, means, tc.max_patches, tc.seed,
                                   config.channels)
    trace = forward_image(params, config, seq.patches)
    heat = render_attention_map(trace.p, seq.origins, norm.shape)
    Image.fromarray(heat, mode="L").save(args.out)
    print(f"attention_map\t{args.out}\t{heat.shape[1]}x{heat.shape[0]}")
    return EXIT_OK


def _cmd_gradcheck(args, cfg, seed):
    report = trainer_mod.gradient_check(seed=seed, n_samples=args.samples,
                                        rtol=args.rtol, variant=args.variant)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "attn-map": _cmd_attn_map,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None):
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = _config_file_values(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else (
            int(cfg["seed"]) if "seed" in cfg else 0)
        threads = args.threads if args.threads is not None else (
            int(cfg["threads"]) if "threads" in cfg else 1)
        import numba
        from threadpoolctl import threadpool_limits

        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
        with threadpool_limits(limits=threads):
            return _COMMANDS[args.command](args, cfg, seed)
    except NumericFaultError as exc:
        print(f"error: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidInputError, ScriptIdError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
