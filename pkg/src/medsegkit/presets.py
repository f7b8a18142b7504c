"""Pre-configured segmentation trainer with researched defaults.

``SegmentationTrainer`` supplies every builder hook except ``build_network``:
a combined Dice + cross-entropy criterion that picks the binary or multiclass
variant from ``num_classes`` (optionally wrapped for deep supervision), SGD
with momentum 0.99 and Nesterov acceleration, polynomial learning-rate decay,
global gradient-norm clipping, and divisible-shape input padding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .layers import PadToMultiple
from .losses import DeepSupervisionLoss, DiceCELoss, classify_logits
from .metrics import binary_dice, dice_similarity_coefficient
from .numerics import PolyLRScheduler
from .training import Trainer


@dataclass
class SegmentationConfig:
    """Knobs of the segmentation preset; ``num_classes=1`` means binary."""

    num_classes: int = 1
    num_dims: int = 2
    deep_supervision: bool = False
    ema: bool = False
    base_lr: float = 1e-2
    clip_norm: float = 12.0

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_dims not in (2, 3):
            raise ValueError(f"num_dims must be 2 or 3, got {self.num_dims}")


def default_optimizer(params, base_lr: float = 1e-2) -> torch.optim.SGD:
    """SGD with momentum 0.99 and Nesterov acceleration."""
    return torch.optim.SGD(params, lr=base_lr, momentum=0.99, nesterov=True)


def default_criterion(
    num_classes: int,
    deep_supervision: bool = False,
    num_scales: int | None = None,
) -> nn.Module:
    """Dice + cross-entropy, wrapped for deep supervision when requested.

    ``num_scales=None`` lets the wrapper take the scale count from the
    prediction list at call time.
    """
    criterion: nn.Module = DiceCELoss(num_classes)
    if deep_supervision:
        criterion = DeepSupervisionLoss(criterion, num_scales=num_scales)
    return criterion


def backward_with_clip(loss: torch.Tensor, params, clip_norm: float = 12.0) -> None:
    """Backward pass followed by global gradient-norm clipping."""
    loss.backward()
    torch.nn.utils.clip_grad_norm_(params, clip_norm)


class SegmentationTrainer(Trainer):
    """Trainer preset for semantic segmentation; override ``build_network`` only.

    Configuration lives in plain attributes so a script can write
    ``trainer.num_classes = 4`` or ``trainer.deep_supervision = True`` before
    calling ``train()``.
    """

    num_classes: int = 1
    num_dims: int = 2
    deep_supervision: bool = False
    base_lr: float = 1e-2
    clip_norm: float = 12.0
    padding_divisor: int = 16
    momentum: float = 0.99
    nesterov: bool = True
    lr_power: float = 0.9

    def build_toolbox(self):
        expected_rank = len(self.example_shape) - 1
        if expected_rank != self.num_dims:
            raise ValueError(
                f"num_dims={self.num_dims} but the training data is {expected_rank}-D"
            )
        return super().build_toolbox()

    def build_padding_module(self) -> PadToMultiple:
        return PadToMultiple(self.padding_divisor)

    def build_optimizer(self, params) -> torch.optim.Optimizer:
        return torch.optim.SGD(
            params, lr=self.base_lr, momentum=self.momentum, nesterov=self.nesterov
        )

    def build_scheduler(self, optimizer) -> PolyLRScheduler:
        total = self._planned_epochs if self._planned_epochs else 1000
        return PolyLRScheduler(optimizer, total_epochs=total, power=self.lr_power)

    def build_criterion(self) -> nn.Module:
        return default_criterion(self.num_classes, self.deep_supervision)

    def backward(self, loss: torch.Tensor) -> None:
        assert self.toolbox is not None
        backward_with_clip(loss, self.toolbox.model.parameters(), self.clip_norm)

    def val_case_metrics(self, pred: torch.Tensor, label: torch.Tensor) -> dict[str, float]:
        if self.num_classes == 1:
            return {"dice": binary_dice(pred, label)}
        per_class = dice_similarity_coefficient(pred, label, self.num_classes)
        extras = {f"dice_c{c}": float(per_class[c]) for c in range(self.num_classes)}
        extras["dice"] = float(per_class.mean())
        return extras

    def _predict_labels(self, logits: torch.Tensor) -> torch.Tensor:
        return classify_logits(logits, self.num_classes).squeeze(0)

    def config_snapshot(self) -> dict:
        config = asdict(
            SegmentationConfig(
                num_classes=self.num_classes,
                num_dims=self.num_dims,
                deep_supervision=self.deep_supervision,
                ema=self.ema,
                base_lr=self.base_lr,
                clip_norm=self.clip_norm,
            )
        )
        config.update(
            ema_decay=self.ema_decay,
            padding_divisor=self.padding_divisor,
            momentum=self.momentum,
            nesterov=self.nesterov,
            lr_power=self.lr_power,
        )
        return config
