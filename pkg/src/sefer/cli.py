"""Command-line interface.

Commands:
  stats    per-class counts for the configured splits
  weights  inverse-frequency class weights from the train split
  synth    generate a deterministic synthetic dataset plus a ready config
  train    fine-tune / train and checkpoint on validation improvement
  eval     score a checkpoint on a manifest; writes report and predictions
  predict  classify a single image with a checkpoint

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 data or
contract violation.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import EvalPipeline, TrainPipeline, decode_image
from .config import (OUT_ROOT_ENV, archive_config, load_run_config)
from .dataset import compute_class_weights, compute_distribution
from .errors import CheckpointError, ConfigError, exit_code_for
from .labels import CLASS_NAMES, NUM_CLASSES
from .metrics import emit_report, write_predictions
from .nn.checkpoint import (build_from_checkpoint, load_checkpoint,
                            load_state_dict, reshape_head, save_checkpoint)
from .nn.layers import softmax
from .nn.network import SEResNet
from .synth import generate_synthetic_dataset
from .training import (CheckpointMeta, EvalSource, ManifestBatcher,
                       evaluate_model, load_train_state, run_training)

SYNTH_TRAIN_DEFAULTS = {
    "batch_size": 32, "micro_batches": 4, "momentum": 0.9,
    "weight_decay": 0.0005, "lr_head": 0.05, "lr_backbone": 0.05,
    "validate_every": None, "patience": 5, "max_iterations": 500,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sefer",
        description="7-class facial expression recognition: data "
                    "harmonization, training, and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to the run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config out_dir")
        p.add_argument("--workers", type=int, default=None,
                       help="override the config worker count")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE",
                       help="override any config field, e.g. "
                            "--set train.lr_head=0.01")

    p_stats = sub.add_parser("stats", help="per-class sample counts")
    add_common(p_stats)
    p_stats.add_argument("--json", action="store_true")

    p_weights = sub.add_parser("weights", help="inverse-frequency class weights")
    add_common(p_weights)
    p_weights.add_argument("--json", action="store_true")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--train-per-class", type=int, default=40)
    p_synth.add_argument("--val-per-class", type=int, default=12)
    p_synth.add_argument("--image-size", type=int, default=32)
    p_synth.add_argument("--noise", type=float, default=0.05)

    p_train = sub.add_parser("train", help="run training")
    add_common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the last checkpoint in out_dir")

    p_eval = sub.add_parser("eval", help="score a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val"), default="val")
    p_eval.add_argument("--format", choices=("json", "table"), default="table")

    p_predict = sub.add_parser("predict", help="classify one image")
    p_predict.add_argument("--checkpoint", required=True)
    p_predict.add_argument("--image", required=True)
    p_predict.add_argument("--json", action="store_true")
    return parser


def _load_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
        overrides.append(f"train.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return load_run_config(args.config, overrides)


def _split_or_fail(config, split_name):
    spec = config.data_train if split_name == "train" else config.data_val
    if spec is None:
        raise ConfigError(f"config has no data.{split_name} section")
    return spec


def cmd_stats(args):
    config = _load_config(args)
    result = {}
    for split_name, spec in (("train", config.data_train),
                             ("val", config.data_val)):
        if spec is None:
            continue
        manifest = spec.build(split_name)
        dist = compute_distribution(manifest)
        result[split_name] = {"counts": list(dist.counts), "total": dist.total}
    if not result:
        raise ConfigError("config has no data sections")
    if args.json:
        print(json.dumps(result, indent=2))
        return 0
    for split_name, entry in result.items():
        print(f"{split_name}: {entry['total']} samples")
        for name, n in zip(CLASS_NAMES, entry["counts"]):
            print(f"  {name:<9} {n}")
    return 0


def cmd_weights(args):
    config = _load_config(args)
    manifest = _split_or_fail(config, "train").build("train")
    weights = compute_class_weights(compute_distribution(manifest))
    if args.json:
        print(json.dumps({"weights": list(weights.weights),
                          "rounded": list(weights.rounded())}, indent=2))
        return 0
    for name, w, r in zip(CLASS_NAMES, weights.weights, weights.rounded()):
        print(f"{name:<9} {r:>6.2f}  ({w!r})")
    return 0


def cmd_synth(args):
    out = Path(args.out)
    train_counts = (args.train_per_class,) * NUM_CLASSES
    val_counts = (args.val_per_class,) * NUM_CLASSES
    train_manifest = generate_synthetic_dataset(
        out, train_counts, image_size=args.image_size, seed=args.seed,
        split_name="train", noise=args.noise)
    val_manifest = generate_synthetic_dataset(
        out, val_counts, image_size=args.image_size, seed=args.seed + 1,
        split_name="val", noise=args.noise)
    config = {
        "seed": args.seed,
        "out_dir": "run",
        "workers": 1,
        "data": {"train": {"manifest": "train_manifest.csv"},
                 "val": {"manifest": "val_manifest.csv"}},
        "augment": {"brightness": 0.0, "contrast": 0.0, "saturation": 0.0,
                    "hue": 0.0, "flip_probability": 0.5,
                    "normalize_mean": [0.5, 0.5, 0.5],
                    "normalize_std": [0.25, 0.25, 0.25]},
        "network": {"stage_depths": [1, 1], "stage_widths": [8, 16],
                    "num_classes": NUM_CLASSES, "input_size": args.image_size,
                    "input_channels": 3, "stem_channels": 8,
                    "se_reduction": 4, "bottleneck_ratio": 4,
                    "dtype": "float32", "bn_frozen": False},
        "train": dict(SYNTH_TRAIN_DEFAULTS, seed=args.seed),
        "pretrained": None,
        "class_weights": "auto",
    }
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    print(f"wrote {len(train_manifest)} train / {len(val_manifest)} val "
          f"images under {out}")
    print(f"config: {config_path}")
    return 0


def _prepare_model(config):
    """Fresh network from config, optionally loading pretrained weights with
    the classifier head reshaped to the 7 classes."""
    model = SEResNet(config.network, seed=config.seed)
    if config.pretrained is None:
        return model
    state, sidecar = load_checkpoint(config.pretrained)
    head_w = state.get("head.weight")
    if head_w is None or head_w.shape[0] != NUM_CLASSES:
        state = reshape_head(state, NUM_CLASSES, seed=config.seed)
    load_state_dict(model, state, strict=True)
    return model


def _class_weights(config, train_manifest):
    if config.class_weights == "auto":
        return compute_class_weights(compute_distribution(train_manifest))
    return np.asarray(config.class_weights, dtype=np.float64)


def cmd_train(args):
    config = _load_config(args)
    out_dir = config.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    archive_config(config, out_dir)

    train_spec = _split_or_fail(config, "train")
    val_spec = _split_or_fail(config, "val")
    train_manifest = train_spec.build("train")
    val_manifest = val_spec.build("val")
    weights = _class_weights(config, train_manifest)

    size = config.network.input_size
    train_pipe = TrainPipeline(config.jitter, size, config.normalize_mean,
                               config.normalize_std, seed=config.seed)
    eval_pipe = EvalPipeline(size, config.normalize_mean, config.normalize_std)
    batcher = ManifestBatcher(train_manifest, train_pipe,
                              config.train.batch_size, config.train.seed,
                              root=train_spec.image_root(),
                              workers=config.workers)
    val_source = EvalSource(val_manifest, eval_pipe, config.train.batch_size,
                            root=val_spec.image_root(), workers=config.workers)

    model = _prepare_model(config)
    initial_state = None
    initial_best = None
    if args.resume:
        ckpt_dir = out_dir / "checkpoints"
        state_base = ckpt_dir / "last_state"
        last_state, _ = load_checkpoint(ckpt_dir / "last")
        load_state_dict(model, last_state, strict=True)
        initial_state = load_train_state(state_base)
        best_meta_path = ckpt_dir / "best.meta.json"
        if best_meta_path.exists():
            initial_best = CheckpointMeta.from_dict(
                json.loads(best_meta_path.read_text(encoding="utf-8")))
        print(f"resuming from iteration {initial_state.iteration}")

    normalize = {"mean": list(config.normalize_mean),
                 "std": list(config.normalize_std)}
    best = run_training(model, config.train, batcher, val_source, weights,
                        out_dir=out_dir, config_hash=config.config_hash,
                        normalize=normalize, initial_state=initial_state,
                        initial_best=initial_best,
                        on_validation=lambda entry, report: print(
                            f"iter {entry['iteration']:>6}  "
                            f"loss {entry['loss']:.4f}  "
                            f"criterion {entry['criterion']:.4f}"
                            f"{'  *' if entry['is_best'] else ''}"))
    if best is None:
        raise CheckpointError("training produced no validated checkpoint")

    # final report comes from the best checkpoint, not the last iterate
    best_state, _ = load_checkpoint(out_dir / "checkpoints" / "best")
    load_state_dict(model, best_state, strict=True)
    report, _, records = evaluate_model(model, val_source)
    (out_dir / "report.json").write_text(emit_report(report, "json") + "\n",
                                         encoding="utf-8")
    write_predictions(records, out_dir / "predictions.csv")
    print(emit_report(report, "table"))
    print(f"best iteration {best.iteration}, "
          f"criterion {best.expression_criterion:.4f}")
    return 0


def cmd_eval(args):
    config = _load_config(args)
    spec = _split_or_fail(config, args.split)
    manifest = spec.build(args.split)
    model, sidecar = build_from_checkpoint(args.checkpoint, seed=config.seed)
    normalize = sidecar.get("normalize") or {}
    mean = tuple(normalize.get("mean", config.normalize_mean))
    std = tuple(normalize.get("std", config.normalize_std))
    pipe = EvalPipeline(model.config.input_size, mean, std)
    source = EvalSource(manifest, pipe, config.train.batch_size,
                        root=spec.image_root(), workers=config.workers)
    report, _, records = evaluate_model(model, source)
    out_dir = config.resolved_out_dir() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(emit_report(report, "json") + "\n",
                                         encoding="utf-8")
    write_predictions(records, out_dir / "predictions.csv")
    print(emit_report(report, args.format))
    return 0


def cmd_predict(args):
    model, sidecar = build_from_checkpoint(args.checkpoint)
    normalize = sidecar.get("normalize") or {}
    mean = tuple(normalize.get("mean", (0.5, 0.5, 0.5)))
    std = tuple(normalize.get("std", (0.25, 0.25, 0.25)))
    pipe = EvalPipeline(model.config.input_size, mean, std)
    img = decode_image(args.image)
    x = pipe(img)[None]
    logits = model.forward(x, train=False)
    probs = softmax(logits.astype(np.float64))[0]
    code = int(np.argmax(probs))
    if args.json:
        print(json.dumps({"class_name": CLASS_NAMES[code], "class_code": code,
                          "probabilities": [float(p) for p in probs]}, indent=2))
    else:
        print(f"{CLASS_NAMES[code]} ({code})")
        for name, p in zip(CLASS_NAMES, probs):
            print(f"  {name:<9} {p:.4f}")
    return 0


_COMMANDS = {"stats": cmd_stats, "weights": cmd_weights, "synth": cmd_synth,
             "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, 0 on --help/--version
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single translation point
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
