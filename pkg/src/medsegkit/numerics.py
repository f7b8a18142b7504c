"""Polynomial learning-rate decay and quotient regression of score trajectories.

The quotient model s(x) = (a·x + b) / (x + c) is the minimal rational family
with a finite plateau: s(0) = b/c, s(∞) = a, monotone increasing on x >= 0
whenever a·c - b > 0. Fitting it to the validation score trajectory yields the
expected maximum score and, through a plateau threshold, the epoch at which
training stops improving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LRScheduler


class InsufficientDataError(ValueError):
    """Too few points to fit the requested model."""


def poly_lr(base_lr: float, epoch: int, total_epochs: int, power: float = 0.9) -> float:
    """Polynomial decay: base_lr * (1 - epoch / total_epochs) ** power."""
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    fraction = max(0.0, 1.0 - epoch / total_epochs)
    return base_lr * fraction**power


class PolyLRScheduler(LRScheduler):
    """Per-epoch polynomial decay toward zero over ``total_epochs``.

    ``total_epochs`` is a plain attribute so a resumed run that extends the
    horizon can re-parameterize the schedule in place.
    """

    def __init__(self, optimizer: Optimizer, total_epochs: int, power: float = 0.9) -> None:
        if total_epochs <= 0:
            raise ValueError(f"total_epochs must be positive, got {total_epochs}")
        self.total_epochs = total_epochs
        self.power = power
        super().__init__(optimizer)

    def get_lr(self) -> list[float]:
        return [
            poly_lr(base, self.last_epoch, self.total_epochs, self.power)
            for base in self.base_lrs
        ]


@dataclass(frozen=True)
class QuotientModel:
    """Fitted rational curve s(x) = (a·x + b) / (x + c)."""

    a: float
    b: float
    c: float

    def __call__(self, x: float | np.ndarray) -> float | np.ndarray:
        return (self.a * x + self.b) / (x + self.c)

    @property
    def plateau(self) -> float:
        return self.a

    @property
    def start(self) -> float:
        """s(0) = b / c."""
        return self.b / self.c

    @property
    def is_monotone_increasing(self) -> bool:
        return self.a * self.c - self.b > 0


@dataclass(frozen=True)
class ScorePrediction:
    """Extrapolated plateau score, the epoch that effectively reaches it, and ETC."""

    max_score: float
    target_epoch: float
    etc_seconds: float


def _solve_linear(x: np.ndarray, y: np.ndarray, c: float) -> tuple[float, float]:
    # y * (x + c) = a * x + b, linear least squares in (a, b)
    design = np.stack([x, np.ones_like(x)], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, y * (x + c), rcond=None)
    return float(coeffs[0]), float(coeffs[1])


def _residual(x: np.ndarray, y: np.ndarray, c: float) -> float:
    a, b = _solve_linear(x, y, c)
    r = (a * x + b) / (x + c) - y
    return float(r @ r)


def _golden_section(fn, lo: float, hi: float, iterations: int = 80) -> float:
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - ratio * (hi - lo)
    x2 = lo + ratio * (hi - lo)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iterations):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - ratio * (hi - lo)
            f1 = fn(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + ratio * (hi - lo)
            f2 = fn(x2)
    return (lo + hi) / 2.0


C_GRID_LO = 1e-2
C_GRID_HI = 1e4


def fit_quotient(epochs, scores) -> QuotientModel:
    """Least-squares fit of s(x) = (a·x + b)/(x + c) with c > 0.

    The pole parameter c is located by a log-spaced grid sweep over
    [1e-2, 1e4] followed by golden-section refinement; for each candidate c,
    (a, b) come from the linear system y·(x + c) = a·x + b and the candidate
    is scored by the true squared residual of s.
    """
    x = np.asarray(list(epochs), dtype=np.float64)
    y = np.asarray(list(scores), dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("epochs and scores must be 1-D sequences of equal length")
    if len(x) < 3:
        raise InsufficientDataError(f"need at least 3 points, got {len(x)}")
    if np.unique(x).size == 1:
        raise ValueError("all epochs are identical")
    if not np.all(np.diff(x) > 0):
        raise ValueError("epochs must be strictly increasing")

    grid = np.logspace(math.log10(C_GRID_LO), math.log10(C_GRID_HI), 121)
    residuals = [_residual(x, y, c) for c in grid]
    best = int(np.argmin(residuals))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    c = _golden_section(lambda cc: _residual(x, y, cc), lo, hi)
    a, b = _solve_linear(x, y, c)
    return QuotientModel(a=a, b=b, c=float(c))


def predict_plateau(
    model: QuotientModel,
    current_epoch: int,
    mean_epoch_seconds: float,
    plateau_fraction: float = 0.95,
) -> ScorePrediction | None:
    """Epoch x* covering ``plateau_fraction`` of the rise from s(0) to the plateau.

    Closed form x* = c·f / (1 - f). Returns None when the fitted curve is not
    monotone increasing (a·c <= b), signalling that no prediction is available.
    """
    if mean_epoch_seconds <= 0:
        raise ValueError(f"mean_epoch_seconds must be positive, got {mean_epoch_seconds}")
    if not 0 < plateau_fraction < 1:
        raise ValueError(f"plateau_fraction must lie in (0, 1), got {plateau_fraction}")
    if not model.is_monotone_increasing:
        return None
    target_epoch = model.c * plateau_fraction / (1.0 - plateau_fraction)
    etc = max(0.0, target_epoch - current_epoch) * mean_epoch_seconds
    return ScorePrediction(max_score=model.a, target_epoch=target_epoch, etc_seconds=etc)
