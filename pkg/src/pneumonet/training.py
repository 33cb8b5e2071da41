"""Optimizer, gradual-unfreeze scheduling, and the deterministic training loop.

Everything that varies between runs flows from TrainConfig.seed: batch
shuffling uses seed+epoch, per-sample augmentation seeds fold in (seed,
epoch, sample index). Adam keeps per-parameter moment buffers and step
counters keyed by parameter name, so a block unfrozen mid-run starts its
bias correction from its own first step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses, metrics
from .errors import ConfigError, DataError, NumericError
from .imaging import _atomic_write, augment, standardize
from .models import CLASS_NAMES
from .tensor import Tensor, sigmoid

SEG_LOSSES = ("dice_plus_bce", "dice")
CLS_LOSSES = ("ce",)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    loss: str | None = None        # None = task default (dice_plus_bce / ce)
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.loss not in (None, *SEG_LOSSES, *CLS_LOSSES):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.early_stop_patience is not None and self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0 when set")


@dataclass
class UnfreezeSchedule:
    """stages: (start_epoch, [block names]) with strictly increasing starts;
    blocks in always_trainable are never frozen."""
    stages: list
    always_trainable: tuple

    def __post_init__(self):
        starts = [s for s, _ in self.stages]
        if any(b >= a for a, b in zip(starts[1:], starts)):
            raise ConfigError(f"stage start epochs must strictly increase: {starts}")
        scheduled = [b for _, blocks in self.stages for b in blocks]
        if len(scheduled) != len(set(scheduled)):
            raise ConfigError("a block appears in more than one stage")

    def scheduled_blocks(self):
        return [b for _, blocks in self.stages for b in blocks]


def default_unfreeze_schedule(model, epochs: int) -> UnfreezeSchedule:
    """Encoder frozen for the first 20% of epochs, then one block unfrozen
    (deepest first) every further 10%."""
    enc = list(model.encoder_block_names)
    deepest_first = list(reversed(enc))
    start0 = max(1, math.floor(0.2 * epochs))
    step = max(1, math.floor(0.1 * epochs))
    stages = [(start0 + i * step, [name]) for i, name in enumerate(deepest_first)]
    always = tuple(b.name for b in model.blocks if b.name not in enc)
    return UnfreezeSchedule(stages, always)


def unfreeze_plan(schedule: UnfreezeSchedule, epoch: int) -> set:
    """Trainable block names at the given epoch."""
    out = set(schedule.always_trainable)
    for start, blocks in schedule.stages:
        if start <= epoch:
            out.update(blocks)
    return out


def apply_unfreeze(model, schedule: UnfreezeSchedule, epoch: int):
    plan = unfreeze_plan(schedule, epoch)
    for blk in model.blocks:
        blk.set_trainable(blk.name in plan)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_metrics: dict
    trainable_param_count: int
    val_loss: float | None = None
    val_metrics: dict | None = None


class AdamState:
    """Per-parameter Adam moments and step counters, keyed by name."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.step = {}


def adam_step(named_params, state: AdamState):
    """One update over parameters that are trainable and carry a gradient."""
    for name, p in named_params:
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape "
                              f"{p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def _augment_seed(base_seed: int, epoch: int, sample_idx: int) -> int:
    ss = np.random.SeedSequence([base_seed, epoch, sample_idx])
    return int(ss.generate_state(1)[0])


def _prepare_batch(dataset, indices, config: TrainConfig, epoch: int,
                   training: bool, dtype):
    xs, ys = [], []
    for idx in indices:
        img = dataset.images[idx]
        target = dataset.targets[idx]
        mask = target if dataset.task == "segmentation" else None
        if training and dataset.augment_params is not None:
            img, mask = augment(img, mask, dataset.augment_params,
                                _augment_seed(config.seed, epoch, int(idx)))
        arr, _ = standardize(img.pixels, dtype)
        xs.append(arr)
        if dataset.task == "segmentation":
            ys.append(mask.pixels.astype(dtype))
        else:
            ys.append(target)
    x = Tensor(np.stack(xs)[:, None])
    if dataset.task == "segmentation":
        return x, np.stack(ys)[:, None]
    return x, np.asarray(ys, dtype=np.int64)


def _resolve_loss(task: str, name: str | None) -> str:
    if task == "segmentation":
        if name in (None, "dice_plus_bce"):
            return "dice_plus_bce"
        if name == "dice":
            return "dice"
        raise ConfigError(f"loss {name!r} not valid for segmentation")
    if name in (None, "ce"):
        return "ce"
    raise ConfigError(f"loss {name!r} not valid for classification")


def _seg_batch_scores(logits_data: np.ndarray, target: np.ndarray):
    # prob >= 0.5 is exactly logit >= 0; avoids exp overflow on large |logit|
    dices, ious = [], []
    for i in range(logits_data.shape[0]):
        pred = (logits_data[i, 0] >= 0.0).astype(np.uint8)
        truth = target[i, 0].astype(np.uint8)
        dices.append(metrics.dice_coefficient(pred, truth))
        ious.append(metrics.iou(pred, truth))
    return dices, ious


def trainable_param_count(model) -> int:
    return sum(t.size for _, t in model.parameters() if t.requires_grad)


def train_epoch(model, dataset, config: TrainConfig, state: AdamState,
                epoch: int = 0) -> EpochReport:
    """One pass of shuffled batches: forward, loss, backward, Adam update.

    Shuffling is seeded by config.seed + epoch; a non-finite loss aborts
    with the failing batch index. Validation fields are left unset.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("train_epoch on an empty dataset")
    loss_name = _resolve_loss(dataset.task, config.loss)
    dtype = model.dtype

    class_weights = None
    if dataset.task == "classification":
        class_weights = losses.inverse_frequency_weights(
            dataset.targets, len(CLASS_NAMES))

    rng = np.random.default_rng(config.seed + epoch)
    order = rng.permutation(n)
    params = model.parameters()

    loss_sum = 0.0
    dices, ious, preds, labels = [], [], [], []
    for bi in range(0, n, config.batch_size):
        batch_idx = order[bi:bi + config.batch_size]
        x, target = _prepare_batch(dataset, batch_idx, config, epoch, True, dtype)
        if dataset.task == "segmentation":
            logits = model.forward(x, return_logits=True)
            if loss_name == "dice_plus_bce":
                loss = losses.dice_plus_bce_loss(logits, target)
            else:
                loss = losses.dice_loss(sigmoid(logits), target)
        else:
            logits = model.forward(x, training=True)
            loss = losses.cross_entropy_loss(logits, target, class_weights)

        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite loss at batch {bi // config.batch_size} "
                f"of epoch {epoch}")
        loss.backward()
        adam_step(params, state)
        for _, p in params:
            p.grad = None

        loss_sum += float(loss.data) * len(batch_idx)
        if dataset.task == "segmentation":
            d, j = _seg_batch_scores(logits.data, target)
            dices += d
            ious += j
        else:
            preds += list(np.argmax(logits.data, axis=1))
            labels += list(target)

    if dataset.task == "segmentation":
        train_metrics = {"dice": float(np.mean(dices)), "iou": float(np.mean(ious))}
    else:
        cm = metrics.ConfusionMatrix.from_predictions(preds, labels, 3)
        rep = metrics.precision_recall_f1(cm)
        train_metrics = {"acc": rep.accuracy, "f1": rep.f1_macro}
    return EpochReport(epoch=epoch, train_loss=loss_sum / n,
                       train_metrics=train_metrics,
                       trainable_param_count=trainable_param_count(model))


def evaluate(model, dataset, config: TrainConfig):
    """Loss and metrics over a dataset in eval mode (no shuffling, no
    augmentation, no class weighting)."""
    n = len(dataset)
    if n == 0:
        raise DataError("evaluate on an empty dataset")
    loss_name = _resolve_loss(dataset.task, config.loss)
    dtype = model.dtype

    loss_sum = 0.0
    dices, ious, preds, labels = [], [], [], []
    for bi in range(0, n, config.batch_size):
        batch_idx = np.arange(bi, min(bi + config.batch_size, n))
        x, target = _prepare_batch(dataset, batch_idx, config, 0, False, dtype)
        if dataset.task == "segmentation":
            logits = model.forward(x, return_logits=True)
            if loss_name == "dice_plus_bce":
                loss = losses.dice_plus_bce_loss(logits, target)
            else:
                loss = losses.dice_loss(sigmoid(logits), target)
            d, j = _seg_batch_scores(logits.data, target)
            dices += d
            ious += j
        else:
            logits = model.forward(x, training=False)
            loss = losses.cross_entropy_loss(logits, target)
            preds += list(np.argmax(logits.data, axis=1))
            labels += list(target)
        loss_sum += float(loss.data) * len(batch_idx)

    if dataset.task == "segmentation":
        out_metrics = {"dice": float(np.mean(dices)), "iou": float(np.mean(ious))}
    else:
        cm = metrics.ConfusionMatrix.from_predictions(preds, labels, 3)
        rep = metrics.precision_recall_f1(cm)
        out_metrics = {"acc": rep.accuracy, "f1": rep.f1_macro}
    return loss_sum / n, out_metrics


def fit(model, train_set, val_set, config: TrainConfig,
        schedule: UnfreezeSchedule | None = None):
    """Train with optional gradual unfreezing and early stopping.

    Unfreeze flags are applied at each epoch boundary before training.
    With early_stop_patience = p, training stops once the number of epochs
    since the best validation loss exceeds p.
    """
    state = AdamState(lr=config.learning_rate)
    history = []
    best_val = None
    since_best = 0
    for epoch in range(config.epochs):
        if schedule is not None:
            apply_unfreeze(model, schedule, epoch)
        report = train_epoch(model, train_set, config, state, epoch)
        val_loss, val_metrics = evaluate(model, val_set, config)
        report.val_loss = val_loss
        report.val_metrics = val_metrics
        history.append(report)
        if config.early_stop_patience is not None:
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                since_best = 0
            else:
                since_best += 1
                if since_best > config.early_stop_patience:
                    break
    return model, history


HISTORY_COLUMNS = {
    "segmentation": ("train_dice", "val_dice", "train_iou", "val_iou"),
    "classification": ("train_acc", "val_acc", "train_f1", "val_f1"),
}


def history_to_csv(history, task: str, path: str):
    """epoch,train_loss,val_loss plus the task's metric columns, %.6f."""
    cols = HISTORY_COLUMNS[task]
    keys = [c.split("_", 1)[1] for c in cols[::2]]
    lines = ["epoch,train_loss,val_loss," + ",".join(cols)]
    for r in history:
        cells = [str(r.epoch), f"{r.train_loss:.6f}", f"{r.val_loss:.6f}"]
        for k in keys:
            cells.append(f"{r.train_metrics[k]:.6f}")
            cells.append(f"{r.val_metrics[k]:.6f}")
        lines.append(",".join(cells))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
