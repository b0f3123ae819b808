import math

import pytest
import torch

from core import ShapeError
from losses import (
    LossWeights,
    bce_loss,
    composite_mask_loss,
    l1_loss,
    mix_mask_losses,
    soft_dice_loss,
    total_loss,
)


def _pair(seed=0, shape=(8, 8)):
    gen = torch.Generator().manual_seed(seed)
    pred = 0.1 + 0.8 * torch.rand(shape, generator=gen, dtype=torch.float64)
    target = (torch.rand(shape, generator=gen, dtype=torch.float64) < 0.5).to(torch.float64)
    return pred, target


def test_l1_examples():
    ones = torch.full((4, 4), 0.75)
    assert l1_loss(ones, ones).item() == 0.0
    assert l1_loss(ones, torch.full((4, 4), 0.25)).item() == pytest.approx(0.5)


def test_l1_matches_pixel_mean():
    pred, target = _pair()
    expected = sum(abs(p - t) for p, t in zip(pred.flatten().tolist(), target.flatten().tolist())) / 64
    assert l1_loss(pred, target).item() == pytest.approx(expected, rel=1e-12)


def test_bce_of_uninformed_prediction_is_log_two():
    pred = torch.full((8, 8), 0.5, dtype=torch.float64)
    target = (torch.arange(64, dtype=torch.float64).reshape(8, 8) % 2)
    assert bce_loss(pred, target).item() == pytest.approx(math.log(2), rel=1e-12)


def test_bce_of_perfect_prediction_is_clamped():
    target = (torch.arange(64, dtype=torch.float64).reshape(8, 8) % 2)
    assert bce_loss(target.clone(), target).item() == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


def test_bce_matches_pixel_formula():
    pred, target = _pair(1)
    expected = -sum(
        t * math.log(p) + (1 - t) * math.log(1 - p)
        for p, t in zip(pred.flatten().tolist(), target.flatten().tolist())
    ) / 64
    assert bce_loss(pred, target).item() == pytest.approx(expected, rel=1e-10)


def test_soft_dice_examples():
    ones = torch.ones((64, 64), dtype=torch.float64)
    zeros = torch.zeros((64, 64), dtype=torch.float64)
    assert soft_dice_loss(ones, ones).item() == pytest.approx(0.0, abs=1e-12)
    assert soft_dice_loss(zeros, zeros).item() == pytest.approx(0.0, abs=1e-12)
    half = torch.full((64, 64), 0.5, dtype=torch.float64)
    assert soft_dice_loss(half, ones).item() == pytest.approx(1 / 3, abs=1e-3)


def test_soft_dice_is_per_sample_for_batches():
    pred = torch.zeros((2, 1, 16, 16), dtype=torch.float64)
    target = torch.zeros((2, 1, 16, 16), dtype=torch.float64)
    pred[0] = 1.0
    target[0] = 1.0
    target[1, 0, :4, :4] = 1.0
    # sample 0 is perfect; sample 1 scores 1 - 1/17
    assert soft_dice_loss(pred, target).item() == pytest.approx((0.0 + 16 / 17) / 2)


def test_composite_mask_loss_endpoints():
    pred, target = _pair(2)
    bce = bce_loss(pred, target)
    dice = soft_dice_loss(pred, target)
    assert composite_mask_loss(pred, target, a=1.0).item() == pytest.approx(bce.item(), rel=1e-12)
    assert composite_mask_loss(pred, target, a=0.0).item() == pytest.approx(dice.item(), rel=1e-12)


def test_mix_mask_losses():
    assert mix_mask_losses(0.6, 0.2, 0.5) == pytest.approx(0.4, abs=1e-12)
    values = [mix_mask_losses(0.6, 0.2, a) for a in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert values == sorted(values)
    with pytest.raises(ValueError):
        mix_mask_losses(0.6, 0.2, 1.5)


def test_total_loss_weighting():
    report = total_loss(1.0, 2.0, 3.0)
    assert report.total == 5.1
    assert (report.l_ltd, report.l_lrs, report.l_seg) == (1.0, 2.0, 3.0)
    assert total_loss(0.0, 0.0, 0.0).total == 0.0


def test_total_loss_ignores_ltd_when_lambda0_is_zero():
    w = LossWeights(lambda0=0.0)
    assert total_loss(1.0, 2.0, 3.0, w).total == total_loss(7.0, 2.0, 3.0, w).total


def test_total_loss_rejects_negative_components():
    with pytest.raises(ValueError):
        total_loss(-0.1, 0.0, 0.0)


@pytest.mark.parametrize("changes", [dict(a=1.5), dict(a=-0.1), dict(lambda0=-1.0), dict(lambda1=-1.0)])
def test_weights_reject_invalid_values(changes):
    with pytest.raises(ValueError):
        LossWeights(**changes)


@pytest.mark.parametrize("loss", [l1_loss, bce_loss, soft_dice_loss, composite_mask_loss])
def test_shape_mismatch(loss):
    with pytest.raises(ShapeError):
        loss(torch.zeros((8, 8)), torch.zeros((8, 9)))


@pytest.mark.parametrize("loss", [l1_loss, bce_loss, soft_dice_loss, composite_mask_loss])
def test_gradients_match_finite_differences(loss):
    pred, target = _pair(3)
    pred.requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda p: loss(p, target), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4
    )
