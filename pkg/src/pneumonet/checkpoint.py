"""Bit-exact model checkpoints.

Layout: one magic line, one canonical-JSON header line (sorted keys), then
the body: every tensor's little-endian float32 buffer concatenated in header
order with gap-free offsets. The header carries the model kind, width
config, per-tensor name/shape/offset/trainable entries, a CRC-32 of the
body, and caller metadata (seed, epochs, input side, batch-norm init flag).
Save/load/save reproduces identical bytes.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

from .errors import CheckpointError
from .imaging import _atomic_write
from .layers import BatchNorm2d
from .models import ClassifierModel, SegmentationModel, WidthConfig

MAGIC = b"PNEUMONET-CKPT v1\n"
VERSION = 1


def _canonical_entries(model):
    """[(name, role, get_array, set_array, trainable)] in checkpoint order."""
    entries = []
    for blk in model.blocks:
        for name, tensor in blk.parameters():
            entries.append((
                name, "param",
                (lambda t=tensor: t.data),
                (lambda arr, t=tensor: setattr(t, "data", arr)),
                tensor.requires_grad))
        for name, get, set_ in blk.buffers():
            entries.append((name, "buffer", get, set_, False))
    return entries


def _bn_stats(model):
    out = []
    for blk in model.blocks:
        for _, layer in blk.named_layers:
            if isinstance(layer, BatchNorm2d):
                out.append(layer.stats)
    return out


def save_checkpoint(model, path: str, metadata: dict | None = None):
    metadata = dict(metadata or {})
    stats = _bn_stats(model)
    metadata.setdefault("bn_initialized",
                        bool(stats) and all(s.initialized for s in stats))

    tensors = []
    chunks = []
    offset = 0
    for name, role, get, _, trainable in _canonical_entries(model):
        arr = np.ascontiguousarray(get(), dtype="<f4")
        raw = arr.tobytes()
        tensors.append({
            "name": name,
            "role": role,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "nbytes": len(raw),
            "trainable": bool(trainable),
        })
        chunks.append(raw)
        offset += len(raw)
    body = b"".join(chunks)

    header = {
        "version": VERSION,
        "kind": model.kind,
        "width": {
            "base_channels": model.width.base_channels,
            "dense_layers": model.width.dense_layers,
            "growth": model.width.growth,
            "in_channels": model.width.in_channels,
        },
        "metadata": metadata,
        "tensors": tensors,
        "crc32": zlib.crc32(body),
    }
    header_line = json.dumps(header, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    _atomic_write(path, MAGIC + header_line + b"\n" + body)


def load_checkpoint(path: str, expected_kind: str | None = None):
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None

    if not blob.startswith(MAGIC):
        raise CheckpointError(
            f"{path}: not a recognized checkpoint (bad magic or unsupported "
            "version)")
    nl = blob.find(b"\n", len(MAGIC))
    if nl == -1:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from None
    body = blob[nl + 1:]

    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')}")
    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind is {kind!r}, expected {expected_kind!r}")

    tensors = header.get("tensors", [])
    expected_off = 0
    for t in tensors:
        if t["offset"] != expected_off:
            raise CheckpointError(
                f"{path}: tensor {t['name']} at offset {t['offset']}, "
                f"expected {expected_off} (offsets must be gap-free)")
        expected_off += t["nbytes"]
    if expected_off != len(body):
        raise CheckpointError(
            f"{path}: body is {len(body)} bytes, header describes {expected_off}")
    if zlib.crc32(body) != header.get("crc32"):
        raise CheckpointError(f"{path}: body checksum mismatch")

    width = WidthConfig(**header["width"])
    if kind == "segmentation":
        model = SegmentationModel(width, seed=0, dtype=np.float32)
    elif kind == "classifier":
        model = ClassifierModel(width, seed=0, dtype=np.float32)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")

    entries = _canonical_entries(model)
    if len(entries) != len(tensors):
        raise CheckpointError(
            f"{path}: header lists {len(tensors)} tensors, model has "
            f"{len(entries)}")
    for (name, role, _, set_, _), t in zip(entries, tensors):
        if t["name"] != name or t["role"] != role:
            raise CheckpointError(
                f"{path}: tensor order mismatch: header has "
                f"{t['name']} ({t['role']}), model expects {name} ({role})")
        count = t["nbytes"] // 4
        arr = np.frombuffer(body, dtype="<f4", count=count,
                            offset=t["offset"]).reshape(t["shape"])
        set_(arr.astype(np.float32).copy())

    # restore per-block trainable flags from the per-tensor records
    flag_by_name = {t["name"]: t["trainable"] for t in tensors}
    for blk in model.blocks:
        params = blk.parameters()
        if params:
            blk.set_trainable(flag_by_name[params[0][0]])

    metadata = header.get("metadata", {})
    initialized = bool(metadata.get("bn_initialized", False))
    for stats in _bn_stats(model):
        stats.initialized = initialized
    return model, metadata
