"""Dataset scanning and ROI-based random patch sampling.

``inspect()`` walks a supervised dataset and records, per case, the tight
foreground bounding box, class voxel counts, and per-channel intensity
statistics. From the bounding-box extents it derives a statistical foreground
shape (per-axis median) and a patch shape rounded to a divisibility constant,
which :class:`RandomROIDataset` uses to sample training patches with
configurable foreground oversampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import SupervisedDataset

ROI_DIVISOR = 16
FALLBACK_ROI_CAP = 128


@dataclass
class CaseAnnotation:
    """Per-case foreground, class, and intensity summary."""

    case_id: str
    shape: tuple[int, ...]
    fg_bbox: tuple[tuple[int, int], ...] | None
    class_counts: dict[int, int]
    intensity: list[dict[str, float]]

    @property
    def fg_extent(self) -> tuple[int, ...] | None:
        if self.fg_bbox is None:
            return None
        return tuple(hi - lo for lo, hi in self.fg_bbox)

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "shape": list(self.shape),
            "fg_bbox": [list(b) for b in self.fg_bbox] if self.fg_bbox else None,
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
            "intensity": self.intensity,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "CaseAnnotation":
        bbox = payload.get("fg_bbox")
        return cls(
            case_id=payload["case_id"],
            shape=tuple(payload["shape"]),
            fg_bbox=tuple((int(lo), int(hi)) for lo, hi in bbox) if bbox else None,
            class_counts={int(k): int(v) for k, v in payload["class_counts"].items()},
            intensity=list(payload["intensity"]),
        )


@dataclass
class InspectionReport:
    """Aggregate of case annotations plus the derived ROI patch shape."""

    annotations: list[CaseAnnotation]
    stat_fg_shape: tuple[float, ...] | None
    roi_shape: tuple[int, ...]
    divisor: int = ROI_DIVISOR
    dataset: SupervisedDataset | None = field(default=None, repr=False, compare=False)

    @property
    def total_class_counts(self) -> dict[int, int]:
        totals: dict[int, int] = {}
        for ann in self.annotations:
            for cls, count in ann.class_counts.items():
                totals[cls] = totals.get(cls, 0) + count
        return dict(sorted(totals.items()))

    def to_json(self, indent: int | None = 2) -> str:
        payload = {
            "annotations": [a.to_json_dict() for a in self.annotations],
            "stat_fg_shape": list(self.stat_fg_shape) if self.stat_fg_shape else None,
            "roi_shape": list(self.roi_shape),
            "divisor": self.divisor,
        }
        return json.dumps(payload, indent=indent)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "InspectionReport":
        payload = json.loads(text)
        stat = payload.get("stat_fg_shape")
        return cls(
            annotations=[CaseAnnotation.from_json_dict(a) for a in payload["annotations"]],
            stat_fg_shape=tuple(stat) if stat else None,
            roi_shape=tuple(payload["roi_shape"]),
            divisor=payload.get("divisor", ROI_DIVISOR),
        )


def _annotate(case_id: str, image: torch.Tensor, label: torch.Tensor) -> CaseAnnotation:
    lab = label.detach().cpu().numpy()
    img = image.detach().cpu().numpy()
    fg = lab > 0
    bbox: tuple[tuple[int, int], ...] | None = None
    if fg.any():
        spans = []
        for axis in range(fg.ndim):
            other = tuple(a for a in range(fg.ndim) if a != axis)
            hit = np.any(fg, axis=other)
            indices = np.nonzero(hit)[0]
            spans.append((int(indices[0]), int(indices[-1]) + 1))
        bbox = tuple(spans)
    values, counts = np.unique(lab, return_counts=True)
    class_counts = {int(v): int(c) for v, c in zip(values, counts)}
    intensity = [
        {
            "mean": float(channel.mean()),
            "std": float(channel.std()),
            "min": float(channel.min()),
            "max": float(channel.max()),
        }
        for channel in img.astype(np.float64)
    ]
    return CaseAnnotation(
        case_id=case_id,
        shape=tuple(lab.shape),
        fg_bbox=bbox,
        class_counts=class_counts,
        intensity=intensity,
    )


def _round_up(value: float, divisor: int) -> int:
    return max(divisor, int(math.ceil(value / divisor)) * divisor)


def _round_down(value: int, divisor: int) -> int:
    return max(divisor, (value // divisor) * divisor)


def inspect(
    ds: SupervisedDataset,
    divisor: int = ROI_DIVISOR,
    fallback_cap: int = FALLBACK_ROI_CAP,
) -> InspectionReport:
    """Scan a dataset and derive the ROI patch shape.

    The statistical foreground shape is the per-axis median of bounding-box
    extents over cases that contain foreground. The ROI shape is that median
    rounded up to the next multiple of ``divisor``, clamped to the smallest
    case shape rounded down to a multiple of ``divisor`` (never below
    ``divisor``). With no foreground anywhere the ROI falls back to the
    clamp capped at ``fallback_cap``.
    """
    if len(ds) == 0:
        raise ValueError("cannot inspect an empty dataset")
    annotations = [
        _annotate(ds.case_id(i), *ds.fetch(i)) for i in range(len(ds))
    ]
    rank = len(annotations[0].shape)
    min_shape = tuple(
        min(ann.shape[axis] for ann in annotations) for axis in range(rank)
    )
    caps = tuple(_round_down(n, divisor) for n in min_shape)
    extents = [ann.fg_extent for ann in annotations if ann.fg_extent is not None]
    if extents:
        stat = tuple(float(np.median([e[axis] for e in extents])) for axis in range(rank))
        roi = tuple(min(_round_up(stat[axis], divisor), caps[axis]) for axis in range(rank))
    else:
        stat = None
        roi = tuple(min(cap, fallback_cap) for cap in caps)
    return InspectionReport(
        annotations=annotations,
        stat_fg_shape=stat,
        roi_shape=roi,
        divisor=divisor,
        dataset=ds,
    )


class RandomROIDataset(SupervisedDataset):
    """Random patches of the report's ROI shape with foreground oversampling.

    Each fetch picks a case uniformly at random; with probability
    ``oversample_rate`` the patch is centered on a random foreground voxel
    (guaranteeing foreground content), otherwise its position is uniform over
    all valid positions. Cases smaller than the patch are zero-padded.
    """

    def __init__(
        self,
        report: InspectionReport,
        source: SupervisedDataset | None = None,
        oversample_rate: float = 0.33,
        patch_shape: tuple[int, ...] | None = None,
        seed: int | None = None,
    ) -> None:
        source = source if source is not None else report.dataset
        if source is None:
            raise ValueError("no source dataset: pass one or inspect() the dataset directly")
        super().__init__(source.device)
        if not 0.0 <= oversample_rate <= 1.0:
            raise ValueError(f"oversample_rate must lie in [0, 1], got {oversample_rate}")
        self.report = report
        self.source = source
        self.oversample_rate = float(oversample_rate)
        self.patch_shape = tuple(patch_shape) if patch_shape is not None else tuple(report.roi_shape)
        self._rng = np.random.default_rng(seed)
        self._fg_coords: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.source)

    def case_id(self, index: int) -> str:
        return self.source.case_id(index)

    def rng_state(self) -> dict:
        return self._rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state

    def _foreground_coords(self, case: int, label: torch.Tensor) -> np.ndarray:
        coords = self._fg_coords.get(case)
        if coords is None:
            coords = torch.nonzero(label > 0, as_tuple=False).cpu().numpy()
            self._fg_coords[case] = coords
        return coords

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        case = int(self._rng.integers(len(self.source)))
        image, label = self.source.fetch(case)
        patch = self.patch_shape
        if len(patch) != label.dim():
            raise ValueError(
                f"patch rank {len(patch)} does not match label rank {label.dim()}"
            )

        pad_needed = [max(0, p - n) for p, n in zip(patch, label.shape)]
        padded = any(pad_needed)
        if padded:
            flat: list[int] = []
            for extra in pad_needed[::-1]:
                flat.extend((0, extra))
            image = F.pad(image, flat)
            label = F.pad(label, flat)

        sizes = tuple(label.shape)
        forced = self._rng.random() < self.oversample_rate
        # cached coords stay valid under padding because padding is trailing-only
        coords = self._foreground_coords(case, label) if forced else None
        if forced and coords is not None and len(coords) > 0:
            center = coords[int(self._rng.integers(len(coords)))]
            starts = [
                int(np.clip(c - p // 2, 0, n - p))
                for c, p, n in zip(center, patch, sizes)
            ]
        else:
            starts = [int(self._rng.integers(0, n - p + 1)) for p, n in zip(patch, sizes)]

        region = tuple(slice(s, s + p) for s, p in zip(starts, patch))
        return image[(slice(None),) + region], label[region]
