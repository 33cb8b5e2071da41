"""Training objectives.

Segmentation trains on logits: dice on the sigmoid plus a softplus-form
pixelwise binary cross-entropy, so no log ever sees a saturated probability.
Classification uses log-sum-exp cross-entropy with optional per-class
weights; its backward is the closed-form softmax-minus-onehot.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _accumulate, sigmoid, softplus

DICE_SMOOTH = 1.0


def _as_target(t, like: Tensor) -> Tensor:
    if isinstance(t, Tensor):
        tt = t
    else:
        tt = Tensor(np.asarray(t, dtype=like.data.dtype))
    if tt.shape != like.shape:
        raise ShapeError(f"target shape {tt.shape} != prediction shape {like.shape}")
    return tt


def dice_loss(pred: Tensor, target) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), smooth s = 1."""
    t = _as_target(target, pred)
    inter = (pred * t).sum()
    denom = pred.sum() + t.sum() + DICE_SMOOTH
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / denom


def bce_with_logits_loss(logits: Tensor, target) -> Tensor:
    """Mean over elements of softplus(z) - t*z (the stable BCE form)."""
    t = _as_target(target, logits)
    return (softplus(logits) - logits * t).mean()


def dice_plus_bce_loss(logits: Tensor, target) -> Tensor:
    """Equal-weight sum of dice on sigmoid(logits) and pixelwise BCE."""
    return dice_loss(sigmoid(logits), target) + bce_with_logits_loss(logits, target)


def cross_entropy_loss(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[label] over the batch.

    Stabilized via log-sum-exp; with weights the reduction divides by the
    summed sample weights (so uniform weights reproduce the plain mean).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N,K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"labels must lie in 0..{k - 1}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse

    if class_weights is None:
        w = np.ones(n, dtype=z.dtype)
    else:
        cw = np.asarray(class_weights, dtype=z.dtype)
        if cw.shape != (k,):
            raise ShapeError(f"class_weights must have shape ({k},), got {cw.shape}")
        w = cw[labels]
    wsum = w.sum()
    if wsum <= 0:
        raise ShapeError("class weights select an all-zero batch weight")

    picked = logp[np.arange(n), labels]
    loss_val = -(w * picked).sum() / wsum

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * p * (w / wsum)[:, None])

    return Tensor.from_op(np.asarray(loss_val, dtype=z.dtype), (logits,),
                          bwd, "cross_entropy")


def inverse_frequency_weights(labels, n_classes: int) -> np.ndarray:
    """w_c = N / (K * count_c); absent classes get weight 0."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = labels.size / (n_classes * counts[present])
    return weights
