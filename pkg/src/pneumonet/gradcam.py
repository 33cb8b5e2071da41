"""Grad-CAM heatmaps for the classifier.

The gradient of one pre-softmax logit is taken with respect to a chosen
convolutional activation; per-channel spatial means of that gradient weight
the activation channels, and the ReLU of the weighted sum, upsampled to the
input size and max-normalized, is the heatmap. The model is read-only here:
parameter values are untouched and gradients are cleared afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import GrayImage, resize
from .models import ClassifierModel
from .tensor import Tensor


@dataclass
class Heatmap:
    values: np.ndarray          # (H, W) float32 in [0,1]
    target_class: int
    target_layer: str
    flagged_zero: bool          # True when the raw map was all zeros


def grad_cam(model: ClassifierModel, x: Tensor, class_idx: int,
             target_layer: str | None = None) -> Heatmap:
    """Heatmap of shape x's spatial dims for the given class logit.

    x is a single preprocessed image, (1, C, H, W). The target layer
    defaults to the last convolution inside the dense block.
    """
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"grad_cam expects a (1,C,H,W) input, got {x.shape}")
    if not 0 <= class_idx <= 2:
        raise ConfigError(f"class_idx must be 0..2, got {class_idx}")
    layer = target_layer or model.gradcam_default_layer

    # a requires-grad input guarantees gradients reach the activation even
    # if every block is currently frozen
    probe = Tensor(x.data.copy(), requires_grad=True)
    capture: dict = {}
    logits = model.forward(probe, training=False, capture=capture)
    if layer not in capture:
        raise ConfigError(
            f"unknown target layer {layer!r}; available: {sorted(capture)}")
    act = capture[layer]
    if act.data.ndim != 4:
        raise ShapeError(f"target layer {layer} is not a 4-D activation")

    logits.pick((0, class_idx)).backward()
    grads = act.grad
    activations = act.data

    # the backward pass deposited gradients on the parameters too; drop them
    # so a later training step starts clean
    for _, p in model.parameters():
        p.grad = None

    if grads is None:
        grads = np.zeros_like(activations)
    alpha = grads[0].mean(axis=(1, 2))
    raw = np.maximum((alpha[:, None, None] * activations[0]).sum(axis=0), 0.0)

    h, w = x.shape[2], x.shape[3]
    if h != w:
        raise ShapeError(f"grad_cam expects square inputs, got {h}x{w}")
    peak = float(raw.max())
    if peak <= 0.0:
        return Heatmap(np.zeros((h, w), dtype=np.float32), class_idx, layer, True)
    # normalize before upsampling (bilinear resize is linear, so the order
    # does not matter, and pre-normalized values survive resize's [0,1] clamp)
    upsampled = resize(GrayImage((raw / peak).astype(np.float32)), h).pixels
    m = float(upsampled.max())
    values = upsampled / m if m > 0 else upsampled
    return Heatmap(values.astype(np.float32), class_idx, layer, False)


# jet-style color ramp, piecewise linear in t
def _jet(t: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4.0 * t - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * t - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * t - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


OVERLAY_ALPHA = 0.4


def overlay_heatmap(img: GrayImage, hm: Heatmap) -> np.ndarray:
    """Blend a jet-colored heatmap over the grayscale image.

    Per-pixel blend weight is OVERLAY_ALPHA * heatmap value, so zero-heat
    regions reproduce the grayscale image exactly. Returns (H,W,3) uint8.
    """
    if hm.values.shape != img.pixels.shape:
        raise ShapeError(
            f"heatmap shape {hm.values.shape} != image shape {img.pixels.shape}")
    gray = np.repeat(img.pixels[..., None], 3, axis=-1).astype(np.float64)
    color = _jet(hm.values.astype(np.float64))
    a = (OVERLAY_ALPHA * hm.values)[..., None]
    blended = (1.0 - a) * gray + a * color
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
