"""Rendering helpers for prediction previews and label overlays.

2D tensors render directly; 3D volumes are shown as a horizontal montage of
the three orthogonal mid-slices.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

OVERLAY_COLOR = (255, 64, 64)
OVERLAY_ALPHA = 0.45

PREVIEW_FILENAMES = (
    "input.png",
    "label.png",
    "prediction.png",
    "expected_overlay.png",
    "actual_overlay.png",
)


def _midslices(volume: np.ndarray) -> np.ndarray:
    """(C, D, H, W) -> (C, H', W'): three orthogonal mid-slices side by side."""
    c, d, h, w = volume.shape
    slices = [
        volume[:, d // 2, :, :],
        volume[:, :, h // 2, :],
        volume[:, :, :, w // 2],
    ]
    height = max(s.shape[1] for s in slices)
    padded = []
    for s in slices:
        pad = height - s.shape[1]
        padded.append(np.pad(s, ((0, 0), (0, pad), (0, 0))))
    return np.concatenate(padded, axis=2)


def _as_2d(tensor: torch.Tensor, channel_first: bool) -> np.ndarray:
    array = tensor.detach().cpu().numpy()
    if not channel_first:
        array = array[np.newaxis]
    if array.ndim == 4:
        array = _midslices(array)
    if array.ndim != 3:
        raise ValueError(f"cannot render tensor of shape {tuple(tensor.shape)}")
    return array


def image_to_rgb(image: torch.Tensor) -> np.ndarray:
    """Normalize a (C, *spatial) image tensor into an (H, W, 3) uint8 array."""
    array = _as_2d(image, channel_first=True).astype(np.float64)
    lo, hi = array.min(), array.max()
    scaled = (array - lo) / (hi - lo) if hi > lo else np.zeros_like(array)
    gray = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    if gray.shape[0] >= 3:
        return np.stack([gray[0], gray[1], gray[2]], axis=-1)
    return np.stack([gray[0]] * 3, axis=-1)


def label_to_gray(label: torch.Tensor, num_classes: int | None = None) -> np.ndarray:
    """Scale a (*spatial) class map to visible gray levels, (H, W) uint8."""
    array = _as_2d(label, channel_first=False)[0]
    top = num_classes - 1 if num_classes and num_classes > 1 else max(int(array.max()), 1)
    scaled = np.clip(array.astype(np.float64) / top, 0, 1)
    return np.round(scaled * 255).astype(np.uint8)


def overlay(image_rgb: np.ndarray, label: torch.Tensor) -> np.ndarray:
    """Tint foreground voxels of ``label`` over an RGB rendering of the input."""
    mask2d = _as_2d((label > 0), channel_first=False)[0].astype(bool)
    out = image_rgb.astype(np.float64).copy()
    color = np.array(OVERLAY_COLOR, dtype=np.float64)
    out[mask2d] = (1 - OVERLAY_ALPHA) * out[mask2d] + OVERLAY_ALPHA * color
    return np.round(out).astype(np.uint8)


def save_preview_set(
    directory: str | Path,
    image: torch.Tensor,
    label: torch.Tensor,
    prediction: torch.Tensor,
    num_classes: int | None = None,
) -> list[Path]:
    """Write the five preview artifacts for one case into ``directory``.

    input, ground-truth label, prediction, and the two overlay composites
    (label over input, prediction over input).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = image_to_rgb(image)
    renders = (
        rgb,
        label_to_gray(label, num_classes),
        label_to_gray(prediction, num_classes),
        overlay(rgb, label),
        overlay(rgb, prediction),
    )
    written = []
    for name, array in zip(PREVIEW_FILENAMES, renders):
        path = directory / name
        Image.fromarray(array).save(path)
        written.append(path)
    return written
