"""Evaluation over aligned prediction/label collections.

An :class:`Evaluator` is constructed from metric functions ``fn(pred, label)``
returning either a scalar or a per-class vector (recorded per class plus a
macro mean). Results land in an :class:`EvalResult` with per-case values and
mean/std aggregates (population std).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data.io import ImageVolume
from .inference import Predictor, parse_predictant


class EvaluationError(Exception):
    """Predictions and labels could not be aligned or scored."""


@dataclass
class EvalResult:
    """Per-case metric values plus mean/std aggregates."""

    per_case: dict[str, dict[str, float]]
    mean_metrics: dict[str, float] = field(default_factory=dict)
    std_metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.per_case and not self.mean_metrics:
            keys = sorted({k for values in self.per_case.values() for k in values})
            for key in keys:
                column = [values[key] for values in self.per_case.values() if key in values]
                self.mean_metrics[key] = float(np.mean(column))
                self.std_metrics[key] = float(np.std(column))

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(
            {
                "per_case": self.per_case,
                "mean_metrics": self.mean_metrics,
                "std_metrics": self.std_metrics,
            },
            indent=indent,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _metric_name(fn: Callable) -> str:
    name = getattr(fn, "__name__", None)
    if name and name != "<lambda>":
        return name
    return type(fn).__name__


def _as_label_tensor(item) -> torch.Tensor:
    if isinstance(item, ImageVolume):
        return item.data[0].long() if item.num_channels >= 1 else item.data.long()
    if isinstance(item, torch.Tensor):
        return item
    raise EvaluationError(f"cannot interpret {type(item).__name__} as a label map")


def _entries(source, want_label: bool) -> dict[str, torch.Tensor]:
    if isinstance(source, Mapping):
        pairs = list(source.items())
    elif isinstance(source, Sequence) and not isinstance(source, (str, bytes)):
        pairs = [(str(case_id), item) for case_id, item in source]
    else:
        pairs = parse_predictant(source, is_label=want_label)
    out: dict[str, torch.Tensor] = {}
    for case_id, item in pairs:
        out[str(case_id)] = _as_label_tensor(item) if want_label else item
    return out


class Evaluator:
    """Applies metric functions case by case and aggregates the results."""

    def __init__(self, *metric_fns: Callable, names: Sequence[str] | None = None) -> None:
        if not metric_fns:
            raise ValueError("at least one metric function is required")
        self.metric_fns = list(metric_fns)
        self.names = list(names) if names else [_metric_name(fn) for fn in metric_fns]
        if len(self.names) != len(self.metric_fns):
            raise ValueError("one name required per metric function")

    def _score_case(self, pred: torch.Tensor, label: torch.Tensor) -> dict[str, float]:
        values: dict[str, float] = {}
        for name, fn in zip(self.names, self.metric_fns):
            result = fn(pred, label)
            if isinstance(result, torch.Tensor) and result.dim() >= 1:
                flat = result.flatten()
                for c, value in enumerate(flat.tolist()):
                    values[f"{name}_c{c}"] = float(value)
                values[name] = float(flat.mean())
            else:
                values[name] = float(result)
        for name, value in values.items():
            if not math.isfinite(value):
                raise EvaluationError(f"metric {name} produced a non-finite value {value}")
        return values

    def evaluate(self, preds, labels) -> EvalResult:
        """Score aligned predictions and labels; ids must match exactly."""
        pred_map = _entries(preds, want_label=True)
        label_map = _entries(labels, want_label=True)
        missing = sorted(set(pred_map) ^ set(label_map))
        if missing:
            raise EvaluationError(f"prediction/label ids do not align; unmatched: {missing}")
        per_case = {
            case_id: self._score_case(pred_map[case_id], label_map[case_id])
            for case_id in sorted(pred_map)
        }
        return EvalResult(per_case=per_case)

    def predict_and_evaluate(self, images, labels, predictor: Predictor) -> EvalResult:
        """Run the predictor over ``images`` and score against ``labels``."""
        image_map = _entries_images(images)
        label_map = _entries(labels, want_label=True)
        missing = sorted(set(image_map) ^ set(label_map))
        if missing:
            raise EvaluationError(f"image/label ids do not align; unmatched: {missing}")
        preds = {case_id: predictor.predict(item) for case_id, item in image_map.items()}
        return self.evaluate(preds, label_map)


def _entries_images(source) -> dict[str, "torch.Tensor | ImageVolume"]:
    if isinstance(source, Mapping):
        return {str(k): v for k, v in source.items()}
    if isinstance(source, Sequence) and not isinstance(source, (str, bytes)):
        return {str(k): v for k, v in source}
    return dict(parse_predictant(source, is_label=False))
