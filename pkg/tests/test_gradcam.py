"""Heatmap contracts: shape/range, zero handling, model read-only-ness.

The shared fixture model trains briefly on brightness-coded classes at
32x32 (so the dense block sees 2x2 maps, not single cells); the seeds are
fixed ones measured to give live, class-distinct heatmaps."""

import numpy as np
import numpy.testing as npt
import pytest

from pneumonet.datasets import TrainingSet
from pneumonet.errors import ConfigError, ShapeError
from pneumonet.gradcam import Heatmap, grad_cam, overlay_heatmap
from pneumonet.imaging import GrayImage
from pneumonet.models import ClassifierModel, WidthConfig
from pneumonet.tensor import Tensor
from pneumonet.training import AdamState, TrainConfig, train_epoch

SIDE = 32


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(2)
    imgs, labels = [], []
    for i in range(9):
        lab = i % 3
        base = rng.random((SIDE, SIDE)).astype(np.float32) * 0.2 + 0.3 * lab
        imgs.append(GrayImage(np.clip(base, 0.0, 1.0)))
        labels.append(lab)
    ds = TrainingSet("classification", imgs, labels)
    m = ClassifierModel(WidthConfig(base_channels=4), seed=2)
    cfg = TrainConfig(epochs=3, batch_size=3, seed=2, learning_rate=1e-3)
    state = AdamState(lr=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        train_epoch(m, ds, cfg, state, epoch=epoch)
    return m


def _probe():
    rng = np.random.default_rng(50)
    return Tensor((rng.random((1, 1, SIDE, SIDE)) * 0.5 + 0.3)
                  .astype(np.float32))


def test_heatmap_shape_range_and_fields(model):
    hm = grad_cam(model, _probe(), class_idx=1)
    assert isinstance(hm, Heatmap)
    assert hm.values.shape == (SIDE, SIDE)
    assert hm.values.dtype == np.float32
    assert hm.values.min() >= 0.0
    assert hm.values.max() <= 1.0
    assert hm.target_class == 1
    assert hm.target_layer == "dense_block.layer4.conv2"
    assert not hm.flagged_zero
    assert hm.values.max() == pytest.approx(1.0)   # max-normalized


def test_explicit_target_layers(model):
    x = _probe()
    for layer in ["enc2", "enc3", "dense_block.layer1.conv2", "dense_block"]:
        hm = grad_cam(model, x, 0, target_layer=layer)
        assert hm.target_layer == layer
        assert hm.values.shape == (SIDE, SIDE)
    with pytest.raises(ConfigError, match="unknown target layer"):
        grad_cam(model, x, 0, target_layer="enc9")


def test_input_and_class_validation(model):
    with pytest.raises(ShapeError, match=r"\(1,C,H,W\)"):
        grad_cam(model, Tensor(np.zeros((2, 1, SIDE, SIDE), dtype=np.float32)), 0)
    with pytest.raises(ShapeError, match=r"\(1,C,H,W\)"):
        grad_cam(model, Tensor(np.zeros((SIDE, SIDE), dtype=np.float32)), 0)
    with pytest.raises(ConfigError, match="class_idx"):
        grad_cam(model, _probe(), 3)
    with pytest.raises(ConfigError, match="class_idx"):
        grad_cam(model, _probe(), -1)


def test_all_zero_map_is_flagged_not_normalized(model):
    # zeroing the target conv's weights and bias makes its activation
    # identically zero, so the weighted sum is zero everywhere; restore
    # afterwards because the model fixture is shared
    params = dict(model.parameters())
    w = params["dense_block.layer4.conv2.weight"]
    b = params["dense_block.layer4.conv2.bias"]
    saved = (w.data.copy(), b.data.copy())
    try:
        w.data[:] = 0.0
        b.data[:] = 0.0
        hm = grad_cam(model, _probe(), 2)
        assert hm.flagged_zero
        npt.assert_array_equal(hm.values,
                               np.zeros((SIDE, SIDE), dtype=np.float32))
    finally:
        w.data, b.data = saved


def test_model_state_is_untouched(model):
    params_before = {n: t.data.copy() for n, t in model.parameters()}
    buffers_before = {n: g().copy() for n, g, _ in model.buffers()}
    x = _probe()
    logits_before = model.forward(Tensor(x.data.copy()), training=False).data

    grad_cam(model, x, 0)

    for n, t in model.parameters():
        npt.assert_array_equal(t.data, params_before[n])
        assert t.grad is None, n
    for n, g, _ in model.buffers():
        npt.assert_array_equal(g(), buffers_before[n])
    logits_after = model.forward(Tensor(x.data.copy()), training=False).data
    npt.assert_array_equal(logits_before, logits_after)


def test_deterministic_and_class_sensitive(model):
    x = _probe()
    a = grad_cam(model, x, 0)
    b = grad_cam(model, x, 0)
    npt.assert_array_equal(a.values, b.values)
    c = grad_cam(model, x, 1)
    assert not c.flagged_zero
    assert not np.array_equal(a.values, c.values)


def test_works_on_frozen_model(model):
    # gradients flow through the probe input even when every block is frozen
    flags = {blk.name: blk.trainable for blk in model.blocks}
    try:
        for blk in model.blocks:
            blk.set_trainable(False)
        hm = grad_cam(model, _probe(), 0)
        assert hm.values.shape == (SIDE, SIDE)
        assert not hm.flagged_zero
    finally:
        for blk in model.blocks:
            blk.set_trainable(flags[blk.name])


def test_overlay_zero_heat_reproduces_grayscale():
    rng = np.random.default_rng(3)
    img = GrayImage(rng.random((8, 8)).astype(np.float32))
    hm = Heatmap(np.zeros((8, 8), dtype=np.float32), 0, "dense_block", True)
    out = overlay_heatmap(img, hm)
    assert out.shape == (8, 8, 3)
    assert out.dtype == np.uint8
    expected = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    for ch in range(3):
        npt.assert_array_equal(out[..., ch], expected)


def test_overlay_blends_toward_jet_at_full_heat():
    img = GrayImage(np.zeros((4, 4), dtype=np.float32))
    hm = Heatmap(np.ones((4, 4), dtype=np.float32), 0, "dense_block", False)
    out = overlay_heatmap(img, hm)
    # the jet ramp at t=1 is (0.5, 0, 0); blended over black at alpha 0.4
    # that is 0.2 of full red: rint(0.2 * 255) = 51
    npt.assert_array_equal(out[0, 0], [51, 0, 0])

    with pytest.raises(ShapeError, match="heatmap shape"):
        overlay_heatmap(GrayImage(np.zeros((2, 2), dtype=np.float32)), hm)
