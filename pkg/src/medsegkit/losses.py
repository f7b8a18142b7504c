"""Segmentation loss modules: combined Dice + cross-entropy and deep supervision.

``DiceCELoss`` selects the binary (logistic + BCE) or multiclass
(softmax + CE) variant from ``num_classes``. ``DeepSupervisionLoss`` wraps any
criterion and applies it at every output scale with weights 2^-i, normalized
to sum to one.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .metrics import DEFAULT_EPS, soft_dice


def classify_logits(logits: torch.Tensor, num_classes: int, threshold: float = 0.5) -> torch.Tensor:
    """Turn raw network outputs (B, C, *spatial) into integer label maps (B, *spatial).

    Binary (num_classes == 1): logistic output thresholded; multiclass: argmax
    over the channel axis.
    """
    if num_classes == 1:
        return (torch.sigmoid(logits) > threshold).long().squeeze(1)
    return logits.argmax(dim=1)


class DiceCELoss(nn.Module):
    """Soft dice loss plus cross-entropy, variant chosen by ``num_classes``.

    Expects logits of shape (B, C, *spatial) and integer targets of shape
    (B, *spatial) (a trailing channel axis of size one on the target is
    tolerated for the binary case). Total = dice_weight * (1 - soft dice)
    + ce_weight * cross-entropy.
    """

    def __init__(
        self,
        num_classes: int,
        dice_weight: float = 1.0,
        ce_weight: float = 1.0,
        eps: float = DEFAULT_EPS,
    ) -> None:
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.dice_weight = dice_weight
        self.ce_weight = ce_weight
        self.eps = eps

    def _check_target(self, target: torch.Tensor) -> None:
        hi = int(target.max())
        lo = int(target.min())
        limit = 2 if self.num_classes == 1 else self.num_classes
        if lo < 0 or hi >= limit:
            raise ValueError(
                f"target classes must lie in [0, {limit}), got min={lo} max={hi}"
            )

    def forward(self, logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.num_classes == 1:
            if target.dim() == logits.dim():
                target = target.squeeze(1)
            self._check_target(target)
            t = target.to(logits.dtype).unsqueeze(1)
            ce = F.binary_cross_entropy_with_logits(logits, t)
            dice = soft_dice(torch.sigmoid(logits), t, eps=self.eps, class_dim=1)
        else:
            self._check_target(target)
            ce = F.cross_entropy(logits, target.long())
            probs = torch.softmax(logits, dim=1)
            onehot = (
                F.one_hot(target.long(), self.num_classes).movedim(-1, 1).to(logits.dtype)
            )
            dice = soft_dice(probs, onehot, eps=self.eps, class_dim=1)
        return self.dice_weight * (1.0 - dice) + self.ce_weight * ce


def _downsample_target(target: torch.Tensor, spatial: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbor downsample of an integer class map to ``spatial``."""
    if tuple(target.shape[1:]) == tuple(spatial):
        return target
    squeezed = target.dim() == len(spatial) + 1
    t = target.unsqueeze(1) if squeezed else target
    resized = F.interpolate(t.float(), size=tuple(spatial), mode="nearest-exact")
    if target.dtype.is_floating_point:
        out = resized
    else:
        out = resized.to(target.dtype)
    return out.squeeze(1) if squeezed else out


def deep_supervision_weights(num_scales: int, normalize: bool = True) -> torch.Tensor:
    """Scale weights 2^-i for i in [0, num_scales), optionally summing to 1."""
    if num_scales < 1:
        raise ValueError(f"num_scales must be >= 1, got {num_scales}")
    w = torch.tensor([2.0 ** -i for i in range(num_scales)], dtype=torch.float64)
    return w / w.sum() if normalize else w


class DeepSupervisionLoss(nn.Module):
    """Applies a base criterion at every scale of a multi-output prediction.

    The prediction is a list of outputs ordered full-resolution first; the
    target is a full-resolution class map, downsampled per scale with
    nearest-neighbor. With ``num_scales=None`` the scale count is taken from
    the prediction list at call time.
    """

    def __init__(
        self,
        criterion: nn.Module,
        num_scales: int | None = None,
        weights: Sequence[float] | None = None,
        normalize: bool = True,
    ) -> None:
        super().__init__()
        self.criterion = criterion
        self.num_scales = num_scales
        self.normalize = normalize
        if weights is not None:
            w = torch.as_tensor(list(weights), dtype=torch.float64)
            self.weights = w / w.sum() if normalize else w
        else:
            self.weights = None if num_scales is None else deep_supervision_weights(num_scales, normalize)

    def forward(self, preds: torch.Tensor | Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
        if isinstance(preds, torch.Tensor):
            preds = [preds]
        n = len(preds)
        if self.num_scales is not None and n != self.num_scales:
            raise ValueError(f"expected {self.num_scales} outputs, got {n}")
        weights = self.weights
        if weights is None:
            weights = deep_supervision_weights(n, self.normalize)
        elif len(weights) != n:
            raise ValueError(f"{len(weights)} weights for {n} outputs")
        total: torch.Tensor | None = None
        for w, out in zip(weights, preds):
            scaled_target = _downsample_target(target, out.shape[2:])
            term = float(w) * self.criterion(out, scaled_target)
            total = term if total is None else total + term
        assert total is not None
        return total
