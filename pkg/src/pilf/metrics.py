"""Held-out error metrics and the early-stopping rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import HdiMatrix
from .model import LatentFactors


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_sse: float
    val_rmse: float
    val_mae: float
    elapsed_seconds: float


def _residuals(factors: LatentFactors, eval_set: HdiMatrix) -> np.ndarray:
    if len(eval_set) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return eval_set.values - factors.predict_entries(eval_set.rows, eval_set.cols)


def rmse(factors: LatentFactors, eval_set: HdiMatrix) -> float:
    res = _residuals(factors, eval_set)
    # fsum keeps the total exact to one rounding regardless of |eval_set|
    return math.sqrt(math.fsum((res * res).tolist()) / res.size)


def mae(factors: LatentFactors, eval_set: HdiMatrix) -> float:
    res = _residuals(factors, eval_set)
    return math.fsum(np.abs(res).tolist()) / res.size


def evaluate(factors: LatentFactors, eval_set: HdiMatrix) -> tuple[float, float]:
    """``(rmse, mae)`` from a single prediction pass."""
    res = _residuals(factors, eval_set)
    return (math.sqrt(math.fsum((res * res).tolist()) / res.size),
            math.fsum(np.abs(res).tolist()) / res.size)


def _improves(best: float, value: float, threshold: float) -> bool:
    gain = best - value
    # gains that differ from the threshold only by rounding count as equal to it
    return gain > threshold and not math.isclose(gain, threshold, rel_tol=1e-9)


def check_convergence(
    history: Sequence[EpochReport] | Sequence[float],
    threshold: float = 1e-5,
    patience: int = 2,
) -> bool:
    """True once the best validation RMSE has gone ``patience`` consecutive
    epochs without improving by more than ``threshold``."""
    if patience < 1:
        raise ValueError("patience must be at least 1")
    values = [h.val_rmse if isinstance(h, EpochReport) else float(h) for h in history]
    if not values:
        return False
    best = values[0]
    stale = 0
    for v in values[1:]:
        if _improves(best, v, threshold):
            best = v
            stale = 0
        else:
            best = min(best, v)
            stale += 1
    return stale >= patience


def best_epoch(history: Sequence[EpochReport]) -> EpochReport:
    """Report with the lowest validation RMSE; earliest wins ties."""
    if not history:
        raise ValueError("empty history")
    return min(history, key=lambda r: (r.val_rmse, r.epoch))
