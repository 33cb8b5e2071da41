"""Dataset manifests and the synthetic chest-image generator.

A manifest is a CSV with header image_path,label,lung_mask_path,
infection_mask_path plus an optional split column; relative paths resolve
against the manifest's directory and all referenced files are checked
eagerly. The generator fabricates desk-scale stand-ins: noisy background,
two elliptical "lungs", and class-dependent bright lesions whose pixels
(clipped to the lung) form the infection masks.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import GrayImage, MaskImage, write_png_gray, write_png_mask
from .models import CLASS_NAMES

MANIFEST_COLUMNS = ("image_path", "label", "lung_mask_path", "infection_mask_path")
SPLITS = ("train", "val", "test")

_LABEL_ALIASES = {
    "normal": "Normal",
    "covid-19": "COVID-19",
    "covid19": "COVID-19",
    "covid": "COVID-19",
    "non-covid": "Non-COVID",
    "noncovid": "Non-COVID",
}


@dataclass
class ManifestRecord:
    image_path: str
    label: str | None
    lung_mask_path: str | None
    infection_mask_path: str | None
    split: str

    @property
    def label_index(self) -> int:
        return CLASS_NAMES.index(self.label)


@dataclass
class DatasetManifest:
    path: str
    records: list

    def subset(self, split: str) -> list:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def labeled(self, split: str | None = None) -> list:
        recs = self.records if split is None else self.subset(split)
        return [r for r in recs if r.label is not None]

    def with_infection_masks(self, split: str | None = None) -> list:
        recs = self.records if split is None else self.subset(split)
        return [r for r in recs if r.infection_mask_path is not None]


def normalize_label(token: str) -> str:
    key = token.strip().lower()
    if key not in _LABEL_ALIASES:
        raise DataError(f"unknown label token {token!r}")
    return _LABEL_ALIASES[key]


def load_manifest(path: str) -> DatasetManifest:
    """Parse and eagerly validate a dataset manifest CSV."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            rows = list(reader)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    if not rows:
        raise DataError(f"{path}: empty manifest")

    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != MANIFEST_COLUMNS:
        raise DataError(
            f"{path}: manifest header must start with "
            f"{','.join(MANIFEST_COLUMNS)}, got {','.join(header)}")
    has_split = len(header) >= 5 and header[4] == "split"
    if len(header) > 4 and not has_split:
        raise DataError(f"{path}: unexpected extra column {header[4]!r}")

    records = []
    missing = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 4:
            raise DataError(f"{path}: row {lineno} has {len(row)} fields, need 4")
        img, label, lung, inf = (c.strip() for c in row[:4])
        if not img:
            raise DataError(f"{path}: row {lineno} missing image_path")
        split = "train"
        if has_split and len(row) >= 5 and row[4].strip():
            split = row[4].strip().lower()
            if split not in SPLITS:
                raise DataError(f"{path}: row {lineno} has unknown split {split!r}")

        def _resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        img_p = _resolve(img)
        lung_p = _resolve(lung) if lung else None
        inf_p = _resolve(inf) if inf else None
        for p in (img_p, lung_p, inf_p):
            if p is not None and not os.path.isfile(p):
                missing.append(f"row {lineno}: {p}")
        try:
            lab = normalize_label(label) if label else None
        except DataError as e:
            raise DataError(f"{path}: row {lineno}: {e}") from None
        records.append(ManifestRecord(img_p, lab, lung_p, inf_p, split))

    if missing:
        raise DataError(f"{path}: missing files:\n  " + "\n  ".join(missing))
    return DatasetManifest(os.path.abspath(path), records)


def write_manifest(path: str, rows):
    """rows: iterable of (image, label, lung, infection, split) path tuples,
    already relative to the manifest directory."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(MANIFEST_COLUMNS) + ["split"])
        for row in rows:
            writer.writerow(row)


# -- synthetic generator -------------------------------------------------------------


def _ellipse_mask(side: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _disk_mask(side: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _sample_in_ellipse(rng, cy, cx, ry, rx, radial_lo, radial_hi):
    """Uniform-angle point at a radial fraction of the ellipse axes."""
    t = rng.uniform(0, 2 * np.pi)
    rad = rng.uniform(radial_lo, radial_hi)
    return cy + rad * ry * np.sin(t), cx + rad * rx * np.cos(t)


# lesion radii as fractions of the image side; COVID lesions are small and
# multiple, Non-COVID is one large focal blob
COVID_BLOB_RADIUS = (0.040, 0.070)
NONCOVID_BLOB_RADIUS = (0.090, 0.120)
LUNG_INTENSITY = 0.45
LESION_INTENSITY = 0.75
BACKGROUND_LEVEL = 0.1


def _synth_image(rng: np.random.Generator, side: int, label: str):
    """One synthetic sample: image array, lung mask, infection mask."""
    img = rng.normal(BACKGROUND_LEVEL, 0.02, size=(side, side))

    lungs = []
    lung_mask = np.zeros((side, side), dtype=bool)
    for cx_frac in (0.32, 0.68):
        cy = side * rng.uniform(0.48, 0.52)
        cx = side * (cx_frac + rng.uniform(-0.02, 0.02))
        ry = side * rng.uniform(0.27, 0.33)
        rx = side * rng.uniform(0.13, 0.17)
        lungs.append((cy, cx, ry, rx))
        lung_mask |= _ellipse_mask(side, cy, cx, ry, rx)
    img[lung_mask] = LUNG_INTENSITY + rng.normal(0.0, 0.02, size=int(lung_mask.sum()))

    lesion = np.zeros((side, side), dtype=bool)
    if label == "COVID-19":
        n_blobs = int(rng.integers(3, 7))
        for k in range(n_blobs):
            # alternate lungs so both sides carry lesions, placed peripherally
            cy, cx, ry, rx = lungs[k % 2]
            by, bx = _sample_in_ellipse(rng, cy, cx, ry, rx, 0.45, 0.85)
            r = side * rng.uniform(*COVID_BLOB_RADIUS)
            lesion |= _disk_mask(side, by, bx, r)
    elif label == "Non-COVID":
        cy, cx, ry, rx = lungs[int(rng.integers(0, 2))]
        by, bx = _sample_in_ellipse(rng, cy, cx, ry, rx, 0.0, 0.5)
        r = side * rng.uniform(*NONCOVID_BLOB_RADIUS)
        lesion = _disk_mask(side, by, bx, r)

    if lesion.any():
        img[lesion] = LESION_INTENSITY + rng.normal(0.0, 0.02, size=int(lesion.sum()))
    infection = lesion & lung_mask
    return (np.clip(img, 0.0, 1.0).astype(np.float32),
            lung_mask.astype(np.uint8), infection.astype(np.uint8))


def generate_synthetic(n_per_class: int, side: int, seed: int,
                       out_dir: str) -> str:
    """Write a synthetic dataset and return the manifest path.

    Deterministic for a given seed: one RNG drives generation in fixed
    class-then-index order, and the stratified 70/15/15 split follows that
    order. Normal images get no infection mask. Generation aborts if the
    class-conditional mean lesion areas fail to satisfy
    COVID > Non-COVID > Normal == 0, since that ordering is what makes the
    classification task learnable.
    """
    if side < 32:
        raise DataError(f"synthetic side must be >= 32, got {side}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")

    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    rows = []
    lesion_px = {name: [] for name in CLASS_NAMES}
    n_train = int(round(n_per_class * 0.70))
    n_val = int(round(n_per_class * 0.15))

    for label in CLASS_NAMES:
        tag = label.lower().replace("-", "")
        for i in range(n_per_class):
            pixels, lung, infection = _synth_image(rng, side, label)
            assert (infection & ~lung).sum() == 0
            stem = f"{tag}_{i:04d}"
            img_rel = os.path.join("images", f"{stem}.png")
            lung_rel = os.path.join("masks", f"{stem}_lung.png")
            write_png_gray(GrayImage(pixels), os.path.join(out_dir, img_rel))
            write_png_mask(MaskImage(lung), os.path.join(out_dir, lung_rel))
            inf_rel = ""
            if label != "Normal":
                inf_rel = os.path.join("masks", f"{stem}_inf.png")
                write_png_mask(MaskImage(infection), os.path.join(out_dir, inf_rel))
            lesion_px[label].append(int(infection.sum()))
            if i < n_train:
                split = "train"
            elif i < n_train + n_val:
                split = "val"
            else:
                split = "test"
            rows.append((img_rel, label, lung_rel, inf_rel, split))

    means = {k: float(np.mean(v)) for k, v in lesion_px.items()}
    if not (means["COVID-19"] > means["Non-COVID"] > means["Normal"] == 0.0):
        raise DataError(
            f"synthetic lesion statistics not class-separable: {means}")

    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, rows)
    return manifest_path


# -- training-set assembly ------------------------------------------------------------


@dataclass
class TrainingSet:
    """Materialized samples ready for the training loop.

    task is "segmentation" (targets are masks) or "classification" (targets
    are label indices); augment is None for evaluation splits.
    """
    task: str
    images: list          # GrayImage, already resized
    targets: list         # MaskImage or int per sample
    augment_params: object | None = None

    def __len__(self):
        return len(self.images)


def load_segmentation_set(manifest: DatasetManifest, split: str, side: int,
                          augment_params=None) -> TrainingSet:
    """Infection-mask-bearing records only; Normal images have no target mask."""
    from .imaging import load_image, load_mask, resize, resize_mask
    recs = manifest.with_infection_masks(split)
    if not recs:
        raise DataError(f"no records with infection masks in split {split!r}")
    images, targets = [], []
    for r in recs:
        images.append(resize(load_image(r.image_path), side))
        targets.append(resize_mask(load_mask(r.infection_mask_path), side))
    return TrainingSet("segmentation", images, targets, augment_params)


def load_classification_set(manifest: DatasetManifest, split: str, side: int,
                            augment_params=None) -> TrainingSet:
    from .imaging import load_image, resize
    recs = manifest.labeled(split)
    if not recs:
        raise DataError(f"no labeled records in split {split!r}")
    images, targets = [], []
    for r in recs:
        images.append(resize(load_image(r.image_path), side))
        targets.append(r.label_index)
    return TrainingSet("classification", images, targets, augment_params)
