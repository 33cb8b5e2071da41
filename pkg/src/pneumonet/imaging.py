"""Image I/O and preprocessing.

Images are float arrays in [0,1]; masks are strict 0/1 uint8. PNG goes
through Pillow (8- and 16-bit grayscale, RGB via luminance); binary PGM (P5)
has a small hand-rolled codec since it doubles as the raw-heatmap dump
format. Resizing is bilinear with half-pixel centers for intensities and
nearest-neighbor for masks. Augmentation applies one shared geometric
transform (flip, rotate, zoom) to an image and its mask.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError


@dataclass
class GrayImage:
    """Grayscale intensities, (H, W) float32 in [0,1]."""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ShapeError(f"GrayImage needs a 2-D array, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class MaskImage:
    """Binary mask, (H, W) uint8 with values in {0,1}."""
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2:
            raise ShapeError(f"MaskImage needs a 2-D array, got {arr.shape}")
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ShapeError(f"MaskImage must be 0/1, found values {vals[:5]}")
        self.pixels = arr.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class AugmentParams:
    max_rotation_deg: float = 15.0
    zoom_low: float = 0.9
    zoom_high: float = 1.1
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise DataError("max_rotation_deg must be >= 0")
        if not (0 < self.zoom_low <= self.zoom_high):
            raise DataError("zoom bounds must be positive with low <= high")
        if not (0 <= self.hflip_prob <= 1):
            raise DataError("hflip_prob must lie in [0,1]")


# -- file I/O ---------------------------------------------------------------------


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_pgm(path: str) -> GrayImage:
    with open(path, "rb") as f:
        raw = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed, one whitespace byte after maxval, then raster
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl == -1 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    pos += 1  # single whitespace separator before raster
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not (0 < maxval < 65536):
        raise DataError(f"{path}: bad PGM dimensions or maxval")
    bpp = 1 if maxval < 256 else 2
    need = w * h * bpp
    body = raw[pos:pos + need]
    if len(body) < need:
        raise DataError(f"{path}: truncated PGM raster "
                        f"({len(body)} of {need} bytes)")
    dt = np.uint8 if bpp == 1 else np.dtype(">u2")
    arr = np.frombuffer(body, dtype=dt).reshape(h, w).astype(np.float32) / maxval
    return GrayImage(arr)


def write_pgm(img: GrayImage, path: str):
    """8-bit binary PGM; used for raw heatmap dumps."""
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    _atomic_write(path, header + arr.tobytes())


def _read_png(path: str) -> GrayImage:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "P"):
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            elif mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            elif mode in ("RGB", "RGBA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
                arr = (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1]
                       + 0.114 * rgb[..., 2]) / 255.0
            else:
                raise DataError(f"{path}: unsupported PNG mode {mode}")
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"{path}: PNG decode failed: {e}") from None
    return GrayImage(np.clip(arr, 0.0, 1.0))


def load_image(path: str) -> GrayImage:
    """Decode a PNG or binary PGM into [0,1] grayscale."""
    try:
        with open(path, "rb") as f:
            magic = f.read(8)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if magic.startswith(b"\x89PNG"):
        return _read_png(path)
    if magic.startswith(b"P5"):
        return _read_pgm(path)
    for tag, name in ((b"P2", "ASCII PGM"), (b"P3", "ASCII PPM"),
                      (b"P6", "binary PPM"), (b"\xff\xd8", "JPEG"),
                      (b"BM", "BMP")):
        if magic.startswith(tag):
            raise DataError(f"{path}: unsupported format ({name})")
    raise DataError(f"{path}: unrecognized image format")


def load_mask(path: str) -> MaskImage:
    """Decode a mask file; any intensity above 0.5 counts as foreground."""
    img = load_image(path)
    return MaskImage((img.pixels > 0.5).astype(np.uint8))


def write_png_gray(img: GrayImage, path: str):
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def write_png_mask(mask: MaskImage, path: str):
    write_png_gray(GrayImage(mask.pixels.astype(np.float32)), path)


def write_png_rgb(arr: np.ndarray, path: str):
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError(f"RGB output must be (H,W,3) uint8, got "
                         f"{arr.shape} {arr.dtype}")
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


# -- resize ----------------------------------------------------------------------


def _bilinear_sample(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample arr at fractional (rows x cols) grid, clamping at the edges."""
    h, w = arr.shape
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[:, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(r0, c0)] * (1 - fc) + arr[np.ix_(r0, c1)] * fc
    bot = arr[np.ix_(r1, c0)] * (1 - fc) + arr[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def resize(img: GrayImage, side: int) -> GrayImage:
    """Bilinear resize to side x side using half-pixel sample centers."""
    if side < 1:
        raise ShapeError(f"resize side must be >= 1, got {side}")
    h, w = img.pixels.shape
    if (h, w) == (side, side):
        return GrayImage(img.pixels.copy())
    rows = (np.arange(side) + 0.5) * (h / side) - 0.5
    cols = (np.arange(side) + 0.5) * (w / side) - 0.5
    out = _bilinear_sample(img.pixels.astype(np.float64), rows, cols)
    return GrayImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def resize_mask(mask: MaskImage, side: int) -> MaskImage:
    """Nearest-neighbor resize; output stays binary."""
    if side < 1:
        raise ShapeError(f"resize side must be >= 1, got {side}")
    h, w = mask.pixels.shape
    if (h, w) == (side, side):
        return MaskImage(mask.pixels.copy())
    rows = np.minimum(((np.arange(side) + 0.5) * (h / side)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * (w / side)).astype(np.int64), w - 1)
    return MaskImage(mask.pixels[np.ix_(rows, cols)])


# -- normalization -----------------------------------------------------------------


STD_FLOOR = 1e-8


def standardize(pixels: np.ndarray, dtype=np.float32):
    """Per-image zero-mean/unit-std; constant images become zeros + flag."""
    x = pixels.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if std < STD_FLOOR:
        return np.zeros_like(pixels, dtype=dtype), True
    return ((x - mean) / std).astype(dtype), False


def normalize(img: GrayImage, dtype=np.float32):
    """GrayImage -> (Tensor[1,1,H,W], constant_flag)."""
    from .tensor import Tensor
    arr, flag = standardize(img.pixels, dtype)
    return Tensor(arr[None, None]), flag


# -- augmentation ------------------------------------------------------------------


def augment(img: GrayImage, mask: MaskImage | None, params: AugmentParams,
            seed: int):
    """Random hflip, rotation, and zoom; one transform shared by image and mask.

    The image is resampled bilinearly and clipped to [0,1]; the mask uses
    nearest-neighbor so it stays binary. All randomness comes from `seed`.
    """
    if mask is not None and mask.pixels.shape != img.pixels.shape:
        raise ShapeError(
            f"mask shape {mask.pixels.shape} != image shape {img.pixels.shape}")
    rng = np.random.default_rng(seed)
    flip = rng.random() < params.hflip_prob
    angle = np.deg2rad(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    zoom = rng.uniform(params.zoom_low, params.zoom_high)

    h, w = img.pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # forward transform: flip, then rotate, then zoom (about the center);
    # sampling inverts it, mapping each output pixel back to input coords
    cos_t, sin_t = np.cos(-angle), np.sin(-angle)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    yc, xc = (rr - cy) / zoom, (cc - cx) / zoom
    ys = cos_t * yc - sin_t * xc
    xs = sin_t * yc + cos_t * xc
    if flip:
        xs = -xs
    src_r, src_c = ys + cy, xs + cx

    out_img = _bilinear_grid(img.pixels.astype(np.float64), src_r, src_c)
    out_img = np.clip(out_img, 0.0, 1.0).astype(np.float32)
    out_mask = None
    if mask is not None:
        nr = np.clip(np.rint(src_r).astype(np.int64), 0, h - 1)
        nc = np.clip(np.rint(src_c).astype(np.int64), 0, w - 1)
        out_mask = MaskImage(mask.pixels[nr, nc])
    return GrayImage(out_img), out_mask


def _bilinear_grid(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sample at per-pixel fractional coordinates, edge-clamped."""
    h, w = arr.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = arr[r0, c0] * (1 - fc) + arr[r0, c1] * fc
    bot = arr[r1, c0] * (1 - fc) + arr[r1, c1] * fc
    return top * (1 - fr) + bot * fr
