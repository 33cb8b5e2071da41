"""Command-line interface.

Subcommands: train-seg, train-cls, predict, eval, gradcam, synth. Exit
codes are stable for scripting: 0 success, 2 usage/config problems,
3 numeric failure, 4 I/O or data problems.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datasets import (generate_synthetic, load_classification_set,
                       load_manifest, load_segmentation_set)
from .errors import (CheckpointError, ConfigError, DataError, MetricError,
                     NumericError, PneumonetError, ShapeError)
from .gradcam import grad_cam, overlay_heatmap
from .imaging import load_image, normalize, resize, write_png_rgb
from .metrics import ConfusionMatrix, dice_coefficient, iou, precision_recall_f1
from .models import (CLASS_NAMES, ClassifierModel, SegmentationModel,
                     param_count, transfer_encoder_weights)
from .training import TrainConfig, _prepare_batch, fit, history_to_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pneumonet",
        description="Chest X-ray infection segmentation and pneumonia "
                    "classification.")
    sub = p.add_subparsers(dest="command", required=True)

    ts = sub.add_parser("train-seg", help="train the segmentation model")
    ts.add_argument("--manifest", required=True)
    ts.add_argument("--config", help="key=value config file (defaults if omitted)")
    ts.add_argument("--out", required=True, help="checkpoint output path")
    ts.add_argument("--history", help="history CSV path "
                                      "(default: <out>.history.csv)")

    tc = sub.add_parser("train-cls", help="train the classifier")
    tc.add_argument("--manifest", required=True)
    tc.add_argument("--config")
    tc.add_argument("--encoder-from", dest="encoder_from",
                    help="segmentation checkpoint supplying enc1..enc4")
    tc.add_argument("--out", required=True)
    tc.add_argument("--history")

    pr = sub.add_parser("predict", help="run the prediction workflow")
    pr.add_argument("--image")
    pr.add_argument("--lung-mask", dest="lung_mask")
    pr.add_argument("--manifest", help="batch mode over a manifest")
    pr.add_argument("--cls", required=True)
    pr.add_argument("--seg", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)

    ev = sub.add_parser("eval", help="evaluate on train and val splits")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--cls", required=True)
    ev.add_argument("--seg")
    ev.add_argument("--report", required=True, help="report CSV path")

    gc = sub.add_parser("gradcam", help="write a Grad-CAM overlay")
    gc.add_argument("--image", required=True)
    gc.add_argument("--cls", required=True)
    gc.add_argument("--class", dest="class_idx", default="auto",
                    choices=["auto", "0", "1", "2"])
    gc.add_argument("--layer", help="target layer (default: last dense-block conv)")
    gc.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="generate the synthetic dataset")
    sy.add_argument("--n", type=int, required=True, help="images per class")
    sy.add_argument("--side", type=int, default=64)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    return p


def _load_config(path: str | None) -> RunConfig:
    cfg = RunConfig.from_file(path) if path else RunConfig()
    sys.stdout.write(cfg.to_text())
    sys.stdout.flush()
    return cfg


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.precision == "f64" else np.float32


def _metadata(cfg: RunConfig, history) -> dict:
    return {
        "seed": cfg.seed,
        "epochs_run": len(history),
        "input_side": cfg.side,
        "config": cfg.to_text(),
    }


def _cmd_train_seg(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest)
    train_set = load_segmentation_set(manifest, "train", cfg.side,
                                      cfg.augment_params())
    val_set = load_segmentation_set(manifest, "val", cfg.side)
    model = SegmentationModel(cfg.width_config(), seed=cfg.seed,
                              dtype=_dtype(cfg))
    schedule = cfg.schedule_for(model)
    model, history = fit(model, train_set, val_set, cfg.train_config(), schedule)
    save_checkpoint(model, args.out, _metadata(cfg, history))
    history_path = args.history or args.out + ".history.csv"
    history_to_csv(history, "segmentation", history_path)
    last = history[-1]
    print(f"trained {len(history)} epochs; val dice "
          f"{last.val_metrics['dice']:.4f}, val iou {last.val_metrics['iou']:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_train_cls(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest)
    train_set = load_classification_set(manifest, "train", cfg.side,
                                        cfg.augment_params())
    val_set = load_classification_set(manifest, "val", cfg.side)
    model = ClassifierModel(cfg.width_config(), seed=cfg.seed, dtype=_dtype(cfg))
    if args.encoder_from:
        source, _ = load_checkpoint(args.encoder_from, "segmentation")
        transfer_encoder_weights(source, model)
    else:
        print("warning: no --encoder-from given; training the encoder from "
              "scratch", file=sys.stderr)
    schedule = cfg.schedule_for(model)
    model, history = fit(model, train_set, val_set, cfg.train_config(), schedule)
    save_checkpoint(model, args.out, _metadata(cfg, history))
    history_path = args.history or args.out + ".history.csv"
    history_to_csv(history, "classification", history_path)
    last = history[-1]
    print(f"trained {len(history)} epochs; val acc "
          f"{last.val_metrics['acc']:.4f}, val macro-F1 "
          f"{last.val_metrics['f1']:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    if bool(args.image) == bool(args.manifest):
        raise ConfigError("predict needs exactly one of --image or --manifest")
    classifier, cls_md = load_checkpoint(args.cls, "classifier")
    seg_model, _ = load_checkpoint(args.seg, "segmentation")
    side = int(cls_md.get("input_side", 64))

    jobs = []
    if args.image:
        jobs.append((args.image, args.lung_mask))
    else:
        manifest = load_manifest(args.manifest)
        jobs = [(r.image_path, r.lung_mask_path) for r in manifest.records]

    failures = 0
    for image_path, lung_path in jobs:
        try:
            rec = pipeline.predict(image_path, lung_path, classifier,
                                   seg_model, args.out, side, args.threshold)
            print(rec.to_json())
        except PneumonetError as e:
            failures += 1
            print(f"error: {image_path}: {e}", file=sys.stderr)
    return EXIT_IO if failures else EXIT_OK


def _classification_scores(model, dataset):
    stub = TrainConfig(epochs=1, batch_size=8)
    preds, labels = [], []
    for bi in range(0, len(dataset), 8):
        idx = np.arange(bi, min(bi + 8, len(dataset)))
        x, target = _prepare_batch(dataset, idx, stub, 0, False, model.dtype)
        logits = model.forward(x, training=False)
        preds += list(np.argmax(logits.data, axis=1))
        labels += list(target)
    cm = ConfusionMatrix.from_predictions(preds, labels, len(CLASS_NAMES))
    return precision_recall_f1(cm)


def _segmentation_scores(model, dataset):
    stub = TrainConfig(epochs=1, batch_size=8)
    dices, ious = [], []
    for bi in range(0, len(dataset), 8):
        idx = np.arange(bi, min(bi + 8, len(dataset)))
        x, target = _prepare_batch(dataset, idx, stub, 0, False, model.dtype)
        probs = model.forward(x).data
        for i in range(probs.shape[0]):
            pred = (probs[i, 0] >= 0.5).astype(np.uint8)
            dices.append(dice_coefficient(pred, target[i, 0].astype(np.uint8)))
            ious.append(iou(pred, target[i, 0].astype(np.uint8)))
    return float(np.mean(dices)), float(np.mean(ious))


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    classifier, cls_md = load_checkpoint(args.cls, "classifier")
    side = int(cls_md.get("input_side", 64))

    rows = []
    split_reports = {}
    for split in ("train", "val"):
        dataset = load_classification_set(manifest, split, side)
        split_reports[split] = _classification_scores(classifier, dataset)
    tr, va = split_reports["train"], split_reports["val"]
    for name in ("accuracy", "precision_macro", "recall_macro", "f1_macro"):
        a, b = getattr(tr, name), getattr(va, name)
        rows.append((name, f"{a:.6f}", f"{b:.6f}", f"{a - b:.6f}"))

    if args.seg:
        seg_model, _ = load_checkpoint(args.seg, "segmentation")
        for metric_idx, name in ((0, "dice"), (1, "iou")):
            vals = {}
            for split in ("train", "val"):
                dataset = load_segmentation_set(manifest, split, side)
                vals[split] = _segmentation_scores(seg_model, dataset)[metric_idx]
            rows.append((name, f"{vals['train']:.6f}", f"{vals['val']:.6f}",
                         f"{vals['train'] - vals['val']:.6f}"))

    n_params = param_count(classifier)
    rows.append(("param_count", str(n_params), str(n_params), "0"))

    lines = ["metric,train,val,difference"]
    lines += [",".join(r) for r in rows]
    text = "\n".join(lines) + "\n"
    with open(args.report, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_gradcam(args) -> int:
    classifier, cls_md = load_checkpoint(args.cls, "classifier")
    side = int(cls_md.get("input_side", 64))
    image = resize(load_image(args.image), side)
    if args.class_idx == "auto":
        class_idx = CLASS_NAMES.index(
            pipeline.classify(classifier, image).label)
    else:
        class_idx = int(args.class_idx)
    x, _ = normalize(image, classifier.dtype)
    hm = grad_cam(classifier, x, class_idx, args.layer)
    if hm.flagged_zero:
        print("warning: heatmap is all zero (no positive class evidence at "
              "the target layer)", file=sys.stderr)
    write_png_rgb(overlay_heatmap(image, hm), args.out)
    print(f"gradcam class {class_idx} ({CLASS_NAMES[class_idx]}) "
          f"layer {hm.target_layer} -> {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    manifest_path = generate_synthetic(args.n, args.side, args.seed, args.out)
    print(manifest_path)
    return EXIT_OK


_DISPATCH = {
    "train-seg": _cmd_train_seg,
    "train-cls": _cmd_train_cls,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "gradcam": _cmd_gradcam,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _DISPATCH[args.command](args)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MetricError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except PneumonetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
