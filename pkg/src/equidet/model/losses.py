"""Loss terms: penalty-reduced focal heatmap loss, masked L1 box
regression, restoration L1, transformation MSE and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..errors import NumericError, ShapeError
from .net import NetworkOutput


@dataclass(frozen=True)
class LossWeights:
    transform_weight: float = 8.0
    restore_weight: float = 0.8
    center_weight: float = 1.0
    size_weight: float = 0.1
    offset_weight: float = 1.0

    def validate(self) -> None:
        for name in ("transform_weight", "restore_weight", "center_weight", "size_weight", "offset_weight"):
            if getattr(self, name) < 0:
                raise NumericError(f"{name} must be nonnegative")


def heatmap_focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced focal loss, summed (caller normalizes by object count).

    Cells with target exactly 1 are positives; all others are negatives
    down-weighted by (1 - target)^beta.
    """
    pos = target.eq(1.0)
    neg_weights = (1.0 - target).pow(beta)
    pos_loss = -torch.log(pred) * (1.0 - pred).pow(alpha)
    neg_loss = -torch.log(1.0 - pred) * pred.pow(alpha) * neg_weights
    return torch.where(pos, pos_loss, neg_loss).sum()


def _masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Summed |pred - target| over both channels at masked cells."""
    m = mask.unsqueeze(1).to(pred.dtype)
    return (torch.abs(pred - target) * m).sum()


def loss_detection(output: NetworkOutput, targets, weights: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    """Combined detection loss, normalized by the object count (min 1).

    ``targets`` carries heatmap/size/offset maps, a center-cell mask and the
    object count (see model.targets.DetectionTargets).
    """
    if output.heatmap.shape != targets.heatmap.shape:
        raise ShapeError(
            f"heatmap shape {tuple(output.heatmap.shape)} vs target {tuple(targets.heatmap.shape)}"
        )
    norm = max(float(targets.count), 1.0)
    center = heatmap_focal_loss(output.heatmap, targets.heatmap) / norm
    size = _masked_l1(output.size_map, targets.size, targets.mask) / norm
    offset = _masked_l1(output.offset_map, targets.offset, targets.mask) / norm
    total = weights.center_weight * center + weights.size_weight * size + weights.offset_weight * offset
    return {"center": center, "size": size, "offset": offset, "total": total}


def loss_restoration(restored: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    if restored.shape != hr.shape:
        raise ShapeError(f"restored shape {tuple(restored.shape)} vs target {tuple(hr.shape)}")
    return torch.abs(restored - hr).mean()


def loss_transformation(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the three normalized components."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _is_finite(value) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def total_loss(l_detect, l_transform, l_restore, weights: LossWeights = LossWeights()):
    """Weighted sum of the three task losses."""
    for name, value in (("detection", l_detect), ("transformation", l_transform), ("restoration", l_restore)):
        if not _is_finite(value):
            raise NumericError(f"{name} loss is not finite: {value}")
    return l_detect + weights.transform_weight * l_transform + weights.restore_weight * l_restore
