"""Prediction workflow: classify, conditionally segment, quantify, render.

A Normal classification ends the pipeline immediately; otherwise the
segmentation model produces an infection mask which is intersected with the
supplied lung mask to compute the infected-lung percentage and to render the
clinician-facing overlay (red infection inside green lung contours).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError, MetricError, ShapeError
from .imaging import (GrayImage, MaskImage, load_image, load_mask, normalize,
                      resize, resize_mask, write_png_mask, write_png_rgb)
from .models import CLASS_NAMES
from .tensor import softmax_lastdim


@dataclass
class ClassResult:
    label: str
    probabilities: tuple

    def __post_init__(self):
        if abs(sum(self.probabilities) - 1.0) > 1e-6:
            raise ShapeError("class probabilities must sum to 1")


@dataclass
class PredictionRecord:
    input: str
    label: str
    probs: tuple
    infection_pct: float | None
    mask: str | None
    overlay: str | None
    ms_classify: float
    ms_segment: float | None

    def to_json(self) -> str:
        return json.dumps({
            "input": self.input,
            "label": self.label,
            "probs": [round(p, 6) for p in self.probs],
            "infection_pct": (None if self.infection_pct is None
                              else round(self.infection_pct, 4)),
            "mask": self.mask,
            "overlay": self.overlay,
            "ms_classify": round(self.ms_classify, 3),
            "ms_segment": (None if self.ms_segment is None
                           else round(self.ms_segment, 3)),
        })


def classify(model, image: GrayImage) -> ClassResult:
    """Softmax class probabilities; ties resolve to the lowest class index."""
    x, _ = normalize(image, model.dtype)
    logits = model.forward(x, training=False)
    probs = softmax_lastdim(logits).data[0]
    label = CLASS_NAMES[int(np.argmax(probs))]
    return ClassResult(label, tuple(float(p) for p in probs))


def segment_infection(model, image: GrayImage, threshold: float = 0.5) -> MaskImage:
    """Probability map thresholded at >= threshold."""
    x, _ = normalize(image, model.dtype)
    probs = model.forward(x).data[0, 0]
    return MaskImage((probs >= threshold).astype(np.uint8))


def infection_percentage(infection: MaskImage, lung: MaskImage) -> float:
    """100 * |infection inside lung| / |lung|."""
    if infection.pixels.shape != lung.pixels.shape:
        raise ShapeError(
            f"mask shapes differ: {infection.pixels.shape} vs {lung.pixels.shape}")
    lung_px = int(lung.pixels.sum())
    if lung_px == 0:
        raise MetricError("infection percentage undefined for an empty lung mask")
    inside = int((infection.pixels & lung.pixels).sum())
    return 100.0 * inside / lung_px


def render_overlay(image: GrayImage, lung: MaskImage,
                   infection: MaskImage) -> np.ndarray:
    """Grayscale base, infection-in-lung pixels blended 50% red, lung
    boundary pixels pure green (drawn last). Returns (H,W,3) uint8."""
    if (lung.pixels.shape != image.pixels.shape
            or infection.pixels.shape != image.pixels.shape):
        raise ShapeError("image and mask dimensions must match")
    gray = np.repeat(image.pixels[..., None], 3, axis=-1).astype(np.float64)
    out = gray.copy()

    hot = (infection.pixels & lung.pixels).astype(bool)
    red = np.array([1.0, 0.0, 0.0])
    out[hot] = 0.5 * gray[hot] + 0.5 * red

    # boundary: lung pixels with at least one 4-neighbor outside the mask
    # (zero-padded, so lungs touching the image edge still get a contour)
    m = np.pad(lung.pixels, 1)
    interior = (m[2:, 1:-1] & m[:-2, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2]).astype(bool)
    boundary = lung.pixels.astype(bool) & ~interior
    out[boundary] = np.array([0.0, 1.0, 0.0])

    return np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)


def predict(image_path: str, lung_mask_path: str | None, classifier,
            seg_model, out_dir: str, side: int,
            threshold: float = 0.5) -> PredictionRecord:
    """One image through the full workflow; writes mask/overlay PNGs for
    non-Normal predictions and returns the record."""
    image = resize(load_image(image_path), side)

    t0 = time.perf_counter()
    cls = classify(classifier, image)
    ms_classify = (time.perf_counter() - t0) * 1000.0

    if cls.label == "Normal":
        return PredictionRecord(
            input=image_path, label=cls.label, probs=cls.probabilities,
            infection_pct=None, mask=None, overlay=None,
            ms_classify=ms_classify, ms_segment=None)

    if lung_mask_path is None:
        raise DataError(
            f"{image_path}: classified {cls.label} but no lung mask was "
            "provided; cannot compute the infection percentage")
    lung = resize_mask(load_mask(lung_mask_path), side)

    t1 = time.perf_counter()
    seg_mask = segment_infection(seg_model, image, threshold)
    ms_segment = (time.perf_counter() - t1) * 1000.0

    infection = MaskImage(seg_mask.pixels & lung.pixels)
    pct = infection_percentage(infection, lung)

    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    mask_path = os.path.join(out_dir, f"{stem}_mask.png")
    overlay_path = os.path.join(out_dir, f"{stem}_overlay.png")
    write_png_mask(infection, mask_path)
    write_png_rgb(render_overlay(image, lung, infection), overlay_path)

    return PredictionRecord(
        input=image_path, label=cls.label, probs=cls.probabilities,
        infection_pct=pct, mask=mask_path, overlay=overlay_path,
        ms_classify=ms_classify, ms_segment=ms_segment)
