"""Model architectures: VGG-style encoder, U-Net segmenter, dense-block classifier.

The encoder is shared structure: five conv blocks (conv counts 2,2,3,3,3,
widths base*{1,2,4,8,8}, all 3x3/pad-1/relu, each followed by a 2x2 max
pool). The segmenter pools after the first four blocks only; its four
decoder stages then restore the input resolution exactly, concatenating each
encoder block's pre-pool activation as a skip connection. The classifier
reuses encoder blocks 1-4 and stacks a DenseNet-style block plus a pooled
linear head on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, TransferError
from .layers import BatchNorm2d, Block, Conv2d, DenseLayer
from .tensor import Tensor, relu, sigmoid

VGG_CONV_COUNTS = (2, 2, 3, 3, 3)
VGG_WIDTH_MULTS = (1, 2, 4, 8, 8)

HEAD_INIT_STD = 0.01   # output layers start near-neutral (sigmoid ~0.5, logits ~0)

CLASS_NAMES = ("Normal", "COVID-19", "Non-COVID")


@dataclass(frozen=True)
class WidthConfig:
    """Channel-width knobs; defaults give the full-scale architecture."""
    base_channels: int = 64
    dense_layers: int = 4
    growth: int = 32
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.dense_layers < 1 or self.growth < 1 or self.in_channels < 1:
            raise ConfigError("dense_layers, growth, and in_channels must be >= 1")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _check_input(x: Tensor, in_channels: int, min_side: int = 16):
    if x.data.ndim != 4:
        raise ShapeError(f"model input must be (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if c != in_channels:
        raise ShapeError(f"model expects {in_channels} input channel(s), got {c}")
    if not (_is_pow2(h) and _is_pow2(w)) or h < min_side or w < min_side:
        raise ShapeError(
            f"input spatial dims must be powers of two >= {min_side}, got {h}x{w}")


class EncoderBlock(Block):
    """Stack of 3x3 conv+relu layers; the model pools after calling it."""

    def __init__(self, name, convs):
        super().__init__(name, convs)
        self.convs = [c for _, c in convs]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = relu(conv(x))
        return x


class ConvPairBlock(Block):
    """Two 3x3 conv+relu layers (bottleneck)."""

    def __init__(self, name, conv1, conv2):
        super().__init__(name, [("conv1", conv1), ("conv2", conv2)])
        self.conv1, self.conv2 = conv1, conv2

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


class DecoderBlock(Block):
    """Upsample x2, concatenate the skip activation, then two 3x3 convs."""

    def __init__(self, name, conv1, conv2):
        super().__init__(name, [("conv1", conv1), ("conv2", conv2)])
        self.conv1, self.conv2 = conv1, conv2

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = ops.upsample_nearest2x(x)
        x = ops.concat_channels(x, skip)
        return relu(self.conv2(relu(self.conv1(x))))


class DenseBlock(Block):
    """DenseNet-style block: L composite layers, each bn-relu-conv1x1(4g)
    then bn-relu-conv3x3(g), output concatenated onto its input."""

    def __init__(self, name, composites):
        flat = []
        for i, (bn1, conv1, bn2, conv2) in enumerate(composites, start=1):
            flat += [(f"layer{i}.bn1", bn1), (f"layer{i}.conv1", conv1),
                     (f"layer{i}.bn2", bn2), (f"layer{i}.conv2", conv2)]
        super().__init__(name, flat)
        self.composites = list(composites)

    def forward(self, x: Tensor, training: bool, capture: dict | None = None) -> Tensor:
        feats = x
        for i, (bn1, conv1, bn2, conv2) in enumerate(self.composites, start=1):
            h = conv1(relu(bn1(feats, training)))
            h = conv2(relu(bn2(h, training)))
            if capture is not None:
                capture[f"{self.name}.layer{i}.conv2"] = h
            feats = ops.concat_channels(feats, h)
        return feats


def build_vgg_encoder(width: WidthConfig, rng: np.random.Generator | None = None,
                      dtype=np.float32, n_blocks: int = 5) -> list[EncoderBlock]:
    """Encoder blocks enc1..enc{n_blocks}; weights drawn in block order."""
    if rng is None:
        rng = np.random.default_rng(0)
    blocks = []
    cin = width.in_channels
    for i in range(n_blocks):
        cout = width.base_channels * VGG_WIDTH_MULTS[i]
        convs = []
        for j in range(VGG_CONV_COUNTS[i]):
            convs.append((f"conv{j + 1}", Conv2d(cin, cout, 3, 1, rng, dtype)))
            cin = cout
        blocks.append(EncoderBlock(f"enc{i + 1}", convs))
    return blocks


class SegmentationModel:
    """U-Net over the VGG encoder, producing a 1-channel mask probability map.

    Four pools are active on the way down (enc5 keeps the encoder's depth but
    its trailing pool is unused: the decoder has exactly four upsample
    stages, which is what makes output size equal input size). enc5 plus the
    bottleneck operate at 1/16 resolution.
    """

    kind = "segmentation"

    def __init__(self, width: WidthConfig, seed: int = 0, dtype=np.float32):
        self.width = width
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        b = width.base_channels
        self.encoder = build_vgg_encoder(width, rng, dtype)
        w8 = b * 8
        self.bottleneck = ConvPairBlock(
            "bottleneck",
            Conv2d(w8, w8, 3, 1, rng, dtype), Conv2d(w8, w8, 3, 1, rng, dtype))
        # decoder widths mirror the encoder width at each resolution
        deco = []
        for i, out_w in ((4, b * 8), (3, b * 4), (2, b * 2), (1, b)):
            prev_w = w8 if i == 4 else out_w * 2
            skip_w = b * VGG_WIDTH_MULTS[i - 1]
            deco.append(DecoderBlock(
                f"dec{i}",
                Conv2d(prev_w + skip_w, out_w, 3, 1, rng, dtype),
                Conv2d(out_w, out_w, 3, 1, rng, dtype)))
        self.decoders = deco
        head_conv = Conv2d(b, 1, 1, 0, rng, dtype, init_std=HEAD_INIT_STD)
        self.head = Block("head", [("conv", head_conv)])
        self._head_conv = head_conv

        self.blocks = list(self.encoder) + [self.bottleneck] + deco + [self.head]
        self.block_map = {blk.name: blk for blk in self.blocks}
        self.encoder_block_names = tuple(e.name for e in self.encoder)

    def forward(self, x: Tensor, return_logits: bool = False) -> Tensor:
        _check_input(x, self.width.in_channels)
        skips = []
        h = x
        for i, enc in enumerate(self.encoder):
            act = enc.forward(h)
            skips.append(act)
            h = ops.maxpool2d(act) if i < 4 else act
        h = self.bottleneck.forward(h)
        for dec, skip in zip(self.decoders, reversed(skips[:4])):
            h = dec.forward(h, skip)
        logits = self._head_conv(h)
        return logits if return_logits else sigmoid(logits)

    def parameters(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.parameters())
        return out

    def buffers(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.buffers())
        return out


class ClassifierModel:
    """Encoder blocks 1-4 (pooled after each), dense block, pooled linear head."""

    kind = "classifier"

    def __init__(self, width: WidthConfig, seed: int = 0, dtype=np.float32):
        self.width = width
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        b, L, g = width.base_channels, width.dense_layers, width.growth
        self.encoder = build_vgg_encoder(width, rng, dtype, n_blocks=4)

        composites = []
        cin = b * 8
        for _ in range(L):
            composites.append((
                BatchNorm2d(cin, dtype),
                Conv2d(cin, 4 * g, 1, 0, rng, dtype),
                BatchNorm2d(4 * g, dtype),
                Conv2d(4 * g, g, 3, 1, rng, dtype)))
            cin += g
        self.dense_block = DenseBlock("dense_block", composites)
        self.feature_channels = b * 8 + L * g

        fc = DenseLayer(self.feature_channels, len(CLASS_NAMES), rng, dtype,
                        init_std=HEAD_INIT_STD)
        self.head = Block("head", [("fc", fc)])
        self._fc = fc

        self.blocks = list(self.encoder) + [self.dense_block, self.head]
        self.block_map = {blk.name: blk for blk in self.blocks}
        self.encoder_block_names = tuple(e.name for e in self.encoder)

    @property
    def gradcam_default_layer(self) -> str:
        return f"dense_block.layer{self.width.dense_layers}.conv2"

    def forward(self, x: Tensor, training: bool = False,
                capture: dict | None = None) -> Tensor:
        _check_input(x, self.width.in_channels)
        h = x
        for enc in self.encoder:
            act = enc.forward(h)
            if capture is not None:
                capture[enc.name] = act
            h = ops.maxpool2d(act)
        h = self.dense_block.forward(h, training, capture)
        if capture is not None:
            capture["dense_block"] = h
        pooled = ops.global_avg_pool(h)
        return self._fc(pooled)

    def parameters(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.parameters())
        return out

    def buffers(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.buffers())
        return out


def set_trainable(model, block_names, flag: bool):
    """Toggle the trainable flag on the named blocks only."""
    names = list(block_names)
    unknown = [n for n in names if n not in model.block_map]
    if unknown:
        raise ConfigError(
            f"unknown block name(s) {unknown}; model has {sorted(model.block_map)}")
    for n in names:
        model.block_map[n].set_trainable(flag)
    return model


def param_count(model) -> int:
    """Total learnable parameters (running statistics excluded)."""
    return sum(t.size for _, t in model.parameters())


def param_count_per_block(model) -> dict:
    return {blk.name: blk.param_count() for blk in model.blocks}


def transfer_encoder_weights(source, target: ClassifierModel) -> ClassifierModel:
    """Copy enc1..enc4 parameters from a segmentation model (or any model
    exposing those blocks) into the classifier, bitwise."""
    for i in range(1, 5):
        name = f"enc{i}"
        if name not in source.block_map or name not in target.block_map:
            raise TransferError(f"model lacks encoder block {name}")
        src = source.block_map[name].parameters()
        dst = target.block_map[name].parameters()
        for (sname, st), (dname, dt) in zip(src, dst):
            if st.shape != dt.shape:
                raise TransferError(
                    f"shape mismatch transferring {sname} -> {dname}: "
                    f"{st.shape} vs {dt.shape}")
            dt.data = st.data.astype(dt.data.dtype, copy=True)
    return target
