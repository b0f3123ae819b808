"""
Training losses for the DSA-LTD project.

L_LTD   = |I_LTD - I_FD|_L1
L_LRS   = a * BCE(I_LRS, I_LM) + (1 - a) * DICE(I_LRS, I_LM)
L_seg   = a * BCE(I_seg, I_GT) + (1 - a) * DICE(I_seg, I_GT)
L_Total = lambda0 * L_LTD + lambda1 * L_LRS + L_seg

All pixel reductions are means. Inputs are torch tensors of identical shape,
either single maps (H, W) or batches (B, C, H, W).
"""

from dataclasses import dataclass
from typing import Union

import torch

from constants import BCE_EPS, DICE_SMOOTH, LOSS_A, LOSS_LAMBDA0, LOSS_LAMBDA1
from core import ShapeError
from logging_config import logger

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    a: float = LOSS_A
    lambda0: float = LOSS_LAMBDA0
    lambda1: float = LOSS_LAMBDA1

    def __post_init__(self) -> None:
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"a must lie in [0, 1], got {self.a}")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambda0 and lambda1 must be >= 0")


@dataclass(frozen=True)
class LossReport:
    l_ltd: float
    l_lrs: float
    l_seg: float
    total: float


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        logger.error(f"Loss inputs differ in shape: {tuple(pred.shape)} vs {tuple(target.shape)}")
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    _check_pair(pred, target)
    return (pred - target.to(pred.dtype)).abs().mean()


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with pred clamped to [eps, 1 - eps]."""
    _check_pair(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    t = target.to(pred.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """
    1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth).

    Batched (4-D) input is scored per sample and averaged.
    """
    _check_pair(pred, target)
    t = target.to(pred.dtype)
    dims = tuple(range(1, pred.ndim)) if pred.ndim == 4 else tuple(range(pred.ndim))
    intersection = (pred * t).sum(dim=dims)
    denominator = pred.sum(dim=dims) + t.sum(dim=dims)
    return (1.0 - (2.0 * intersection + smooth) / (denominator + smooth)).mean()


def mix_mask_losses(bce: Scalar, dice: Scalar, a: float) -> Scalar:
    """a * bce + (1 - a) * dice"""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"a must lie in [0, 1], got {a}")
    return a * bce + (1.0 - a) * dice


def composite_mask_loss(pred: torch.Tensor, target: torch.Tensor, a: float = LOSS_A) -> torch.Tensor:
    return mix_mask_losses(bce_loss(pred, target), soft_dice_loss(pred, target), a)


def weighted_total(l_ltd: Scalar, l_lrs: Scalar, l_seg: Scalar, w: LossWeights) -> Scalar:
    return l_seg + w.lambda1 * l_lrs + w.lambda0 * l_ltd


def total_loss(l_ltd: float, l_lrs: float, l_seg: float, w: LossWeights = LossWeights()) -> LossReport:
    """
    Combine component losses into a LossReport.

    Raises:
        ValueError: If a component is negative
    """
    components = {"l_ltd": float(l_ltd), "l_lrs": float(l_lrs), "l_seg": float(l_seg)}
    negative = [name for name, value in components.items() if value < 0]
    if negative:
        logger.error(f"Negative loss components: {negative}")
        raise ValueError(f"loss components must be >= 0: {negative}")
    return LossReport(
        total=float(weighted_total(components["l_ltd"], components["l_lrs"], components["l_seg"], w)),
        **components,
    )
