"""Latent factor matrices, hyperparameters and the regularized objective."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Literal

import numpy as np

if TYPE_CHECKING:
    from .data import HdiMatrix, RatingTriple

Aggregation = Literal["mean", "sum"]

DEFAULT_INIT_SCALE = 0.004


@dataclass
class LatentFactors:
    """Row factors ``x`` (|M| x f) and column factors ``y`` (|N| x f), C-ordered."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[1] != self.y.shape[1]:
            raise ValueError(
                f"factor shapes {self.x.shape} and {self.y.shape} do not share a rank"
            )
        if self.x.shape[1] < 1:
            raise ValueError("rank must be at least 1")

    @property
    def rank(self) -> int:
        return self.x.shape[1]

    @property
    def num_rows(self) -> int:
        return self.x.shape[0]

    @property
    def num_cols(self) -> int:
        return self.y.shape[0]

    def copy(self) -> LatentFactors:
        return LatentFactors(self.x.copy(), self.y.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.x).all() and np.isfinite(self.y).all())

    def predict_entries(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", self.x[rows], self.y[cols])

    def save_csv(self, path: str | os.PathLike) -> None:
        """Dump ``num_rows,num_cols,rank`` then the rows of x and y in shortest round-trip form."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{self.num_rows},{self.num_cols},{self.rank}\n")
            for block in (self.x, self.y):
                for row in block.tolist():
                    fh.write(",".join(repr(float(v)) for v in row))
                    fh.write("\n")

    @classmethod
    def load_csv(cls, path: str | os.PathLike) -> LatentFactors:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            num_rows, num_cols, rank = (int(v) for v in header)
            data = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
        if data.shape != (num_rows + num_cols, rank):
            raise ValueError(
                f"checkpoint {path} holds {data.shape}, header says "
                f"{(num_rows + num_cols, rank)}"
            )
        return cls(data[:num_rows], data[num_rows:])


@dataclass(frozen=True)
class Hyperparams:
    eta: float = 0.01
    lam: float = 0.03
    rank: int = 20
    kp: float | None = None
    ki: float | None = None
    max_epochs: int = 1000
    conv_threshold: float = 1e-5
    conv_patience: int = 2
    seed: int = 0
    init_scale: float = DEFAULT_INIT_SCALE
    shuffle_per_epoch: bool = True
    integral_aggregation: Aggregation = "mean"
    integral_clamp: float | None = None

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if not self.lam >= 0:
            raise ValueError(f"regularization must be non-negative, got {self.lam}")
        if self.rank < 1:
            raise ValueError(f"rank must be at least 1, got {self.rank}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not self.conv_threshold > 0:
            raise ValueError("conv_threshold must be positive")
        if self.conv_patience < 1:
            raise ValueError("conv_patience must be at least 1")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if self.integral_aggregation not in ("mean", "sum"):
            raise ValueError(
                f"integral_aggregation must be 'mean' or 'sum', got {self.integral_aggregation!r}"
            )
        if self.integral_clamp is not None and not self.integral_clamp > 0:
            raise ValueError("integral_clamp must be positive when set")
        for name in ("kp", "ki"):
            value = getattr(self, name)
            if value is not None and value < 0:
                warnings.warn(f"negative gain {name}={value}", stacklevel=3)

    def with_(self, **changes) -> Hyperparams:
        return replace(self, **changes)


def init_factors(
    num_rows: int, num_cols: int, rank: int,
    init_scale: float = DEFAULT_INIT_SCALE, seed: int = 0,
) -> LatentFactors:
    """Factors drawn i.i.d. uniform on (0, init_scale]."""
    if rank < 1:
        raise ValueError(f"rank must be at least 1, got {rank}")
    rng = np.random.default_rng(seed)
    # 1 - U[0, 1) lies in (0, 1]
    x = init_scale * (1.0 - rng.random((num_rows, rank)))
    y = init_scale * (1.0 - rng.random((num_cols, rank)))
    return LatentFactors(x, y)


def predict(factors: LatentFactors, m: int, n: int) -> float:
    if not (0 <= m < factors.num_rows and 0 <= n < factors.num_cols):
        raise IndexError(
            f"entry ({m}, {n}) outside {factors.num_rows}x{factors.num_cols} factors"
        )
    return float(np.dot(factors.x[m], factors.y[n]))


def instance_error(factors: LatentFactors, triple: RatingTriple) -> float:
    """Learning error ``r - x_m . y_n``."""
    return triple.value - predict(factors, triple.row, triple.col)


def regularized_loss(factors: LatentFactors, matrix: HdiMatrix, lam: float) -> float:
    """Instance-wise objective: squared residual plus ``lam`` times both factor norms,
    summed once per known entry."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    rows, cols = matrix.rows, matrix.cols
    residual = matrix.values - factors.predict_entries(rows, cols)
    row_norms = np.einsum("ij,ij->i", factors.x, factors.x)
    col_norms = np.einsum("ij,ij->i", factors.y, factors.y)
    terms = residual * residual + lam * (row_norms[rows] + col_norms[cols])
    return math.fsum(terms.tolist())
