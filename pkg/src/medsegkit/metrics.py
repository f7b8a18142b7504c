"""Dice-family metrics over boolean, integer-class, and soft-probability inputs.

The same functions double as loss components (``soft_dice`` is differentiable
in its first argument) and as evaluation metrics.
"""

from __future__ import annotations

import torch

DEFAULT_EPS = 1e-5


def binary_dice(pred: torch.Tensor, label: torch.Tensor, eps: float = DEFAULT_EPS) -> float:
    """Dice overlap of two boolean masks: (2|p∧l| + eps) / (|p| + |l| + eps).

    Non-boolean inputs are thresholded at zero (any nonzero voxel counts as
    foreground). Two empty masks score exactly 1.0 via the eps ratio.
    """
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs label {tuple(label.shape)}")
    p = pred.bool()
    l = label.bool()
    inter = (p & l).sum().item()
    total = p.sum().item() + l.sum().item()
    return (2.0 * inter + eps) / (total + eps)


def dice_similarity_coefficient(
    pred: torch.Tensor,
    label: torch.Tensor,
    num_classes: int,
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Per-class binary dice of one-hot slices, for classes 0..num_classes-1.

    A class absent from both maps scores 1.0 (empty-empty convention).
    """
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs label {tuple(label.shape)}")
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    for name, t in (("pred", pred), ("label", label)):
        lo, hi = int(t.min()), int(t.max())
        if lo < 0 or hi >= num_classes:
            raise ValueError(
                f"{name} contains class values outside [0, {num_classes}): min={lo} max={hi}"
            )
    scores = [
        binary_dice(pred == c, label == c, eps=eps) for c in range(num_classes)
    ]
    return torch.tensor(scores, dtype=torch.float64)


def soft_dice(
    prob: torch.Tensor,
    target: torch.Tensor,
    eps: float = DEFAULT_EPS,
    class_dim: int = 0,
) -> torch.Tensor:
    """Mean over classes of (2·Σ p·t + eps) / (Σ p + Σ t + eps).

    ``prob`` holds probabilities in [0, 1] with classes along ``class_dim``;
    ``target`` is the matching one-hot (or soft) tensor. Differentiable in
    ``prob``.
    """
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs target {tuple(target.shape)}")
    dims = [d for d in range(prob.dim()) if d != class_dim % prob.dim()]
    inter = (prob * target).sum(dim=dims)
    total = prob.sum(dim=dims) + target.sum(dim=dims)
    per_class = (2.0 * inter + eps) / (total + eps)
    return per_class.mean()
