"""Loss values against independent numpy oracles, plus their gradients."""

import numpy as np
import numpy.testing as npt
import pytest

from pneumonet.errors import ShapeError
from pneumonet.gradcheck import grad_check
from pneumonet.losses import (bce_with_logits_loss, cross_entropy_loss,
                              dice_loss, dice_plus_bce_loss,
                              inverse_frequency_weights)
from pneumonet.tensor import Tensor

TOL = 1e-6


def test_dice_loss_closed_form():
    rng = np.random.default_rng(0)
    p = rng.random((2, 1, 4, 4))
    t = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    loss = dice_loss(Tensor(p), t)
    inter = (p * t).sum()
    expected = 1.0 - (2.0 * inter + 1.0) / (p.sum() + t.sum() + 1.0)
    npt.assert_allclose(loss.item(), expected, rtol=1e-12)


def test_dice_loss_edge_cases():
    ones = np.ones((1, 1, 2, 2))
    zeros = np.zeros_like(ones)
    assert dice_loss(Tensor(ones), ones).item() == pytest.approx(0.0)
    assert dice_loss(Tensor(zeros), zeros).item() == pytest.approx(0.0)
    # totally wrong prediction: intersection 0, smoothing keeps it below 1
    assert dice_loss(Tensor(ones), zeros).item() == pytest.approx(1.0 - 1.0 / 5.0)


def test_bce_with_logits_matches_oracle_and_naive_form():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 1, 4, 4))
    t = (rng.random(z.shape) > 0.5).astype(np.float64)
    loss = bce_with_logits_loss(Tensor(z), t)
    npt.assert_allclose(loss.item(), (np.logaddexp(0.0, z) - t * z).mean(),
                        rtol=1e-12)
    p = 1.0 / (1.0 + np.exp(-z))
    naive = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    npt.assert_allclose(loss.item(), naive, rtol=1e-9)


def test_bce_with_logits_stable_at_extreme_logits():
    z = np.array([[[[1000.0, -1000.0], [500.0, -500.0]]]])
    t = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    with np.errstate(over="raise", invalid="raise"):
        loss = bce_with_logits_loss(Tensor(z), t)
    # the two confident-correct entries contribute ~0; the wrong ones |z|
    npt.assert_allclose(loss.item(), (500.0 + 500.0) / 4.0, rtol=1e-12)


def test_dice_plus_bce_is_the_sum():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(2, 1, 4, 4)))
    t = (rng.random(z.shape) > 0.5).astype(np.float64)
    combined = dice_plus_bce_loss(z, t).item()
    sig = 1.0 / (1.0 + np.exp(-z.data))
    parts = dice_loss(Tensor(sig), t).item() + bce_with_logits_loss(z, t).item()
    npt.assert_allclose(combined, parts, rtol=1e-12)


def test_cross_entropy_uniform_logits_gives_log_k():
    logits = Tensor(np.zeros((4, 3)))
    assert cross_entropy_loss(logits, [0, 1, 2, 0]).item() == pytest.approx(
        np.log(3.0), rel=1e-12)


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 3)) * 4.0
    labels = rng.integers(0, 3, size=6)
    loss = cross_entropy_loss(Tensor(z), labels)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    npt.assert_allclose(loss.item(),
                        -logp[np.arange(6), labels].mean(), rtol=1e-12)


def test_weighted_cross_entropy_matches_oracle():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 3))
    labels = np.array([0, 0, 1, 2, 2])
    weights = np.array([0.5, 2.0, 1.25])
    loss = cross_entropy_loss(Tensor(z), labels, class_weights=weights)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    w = weights[labels]
    expected = -(w * logp[np.arange(5), labels]).sum() / w.sum()
    npt.assert_allclose(loss.item(), expected, rtol=1e-12)
    # uniform weights reduce to the plain mean
    uw = cross_entropy_loss(Tensor(z), labels, class_weights=np.ones(3))
    npt.assert_allclose(uw.item(), cross_entropy_loss(Tensor(z), labels).item(),
                        rtol=1e-12)


def test_cross_entropy_input_validation():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match=r"\(N,K\)"):
        cross_entropy_loss(Tensor(np.zeros(3)), [0])
    with pytest.raises(ShapeError, match="labels must have shape"):
        cross_entropy_loss(z, [0, 1, 2])
    with pytest.raises(ShapeError, match="labels must lie"):
        cross_entropy_loss(z, [0, 3])
    with pytest.raises(ShapeError, match="class_weights"):
        cross_entropy_loss(z, [0, 1], class_weights=[1.0, 1.0])
    with pytest.raises(ShapeError, match="all-zero"):
        cross_entropy_loss(z, [0, 0], class_weights=[0.0, 1.0, 1.0])


def test_target_shape_mismatch_rejected():
    with pytest.raises(ShapeError, match="target shape"):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 4, 4)))


def test_inverse_frequency_weights():
    npt.assert_allclose(inverse_frequency_weights([0, 0, 0, 1, 1, 2], 3),
                        [6 / 9, 1.0, 2.0])
    npt.assert_allclose(inverse_frequency_weights([0, 0], 3),
                        [1 / 3, 0.0, 0.0])
    balanced = inverse_frequency_weights([0, 1, 2], 3)
    npt.assert_allclose(balanced, [1.0, 1.0, 1.0])


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    t = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    z = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
    assert grad_check(lambda s: dice_plus_bce_loss(s, t), z) < TOL

    labels = np.array([0, 2, 1, 1])
    zc = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    assert grad_check(lambda s: cross_entropy_loss(s, labels), zc) < TOL
    weights = np.array([0.5, 2.0, 1.0])
    assert grad_check(
        lambda s: cross_entropy_loss(s, labels, class_weights=weights),
        zc) < TOL
