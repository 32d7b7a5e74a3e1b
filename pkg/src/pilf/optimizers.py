"""Plain SGD and PI-refined SGD epochs over the known entries of an HDI matrix.

Both optimizers share the same per-instance update

    x_m <- x_m + eta * (e_row * y_n - lam * x_m)
    y_n <- y_n + eta * (e_col * x_m - lam * y_n)

applied simultaneously (each side reads the other's pre-update value). Plain
SGD uses the raw learning error ``e = r - x_m . y_n`` for both ``e_row`` and
``e_col``. The PI variant refines it per node:

    e_row = kp * e + ki * I_row[m]
    e_col = kp * e + ki * I_col[n]

where the integrals hold the aggregated per-node errors of all completed
epochs. They are frozen for the duration of an epoch; the errors seen during
the epoch are folded in by :func:`snapshot_accumulators` at its end.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numba
import numpy as np

from .data import HdiMatrix, RatingTriple
from .model import Hyperparams, LatentFactors


class DivergenceError(RuntimeError):
    """A factor entry became non-finite during an update."""

    def __init__(self, epoch: int, row: int, col: int, position: int | None = None) -> None:
        where = f"entry ({row}, {col})"
        if position is not None:
            where += f" at position {position}"
        super().__init__(f"training diverged in epoch {epoch} on {where}")
        self.epoch = epoch
        self.row = row
        self.col = col
        self.position = position


class OptimizerKind(str, enum.Enum):
    PLAIN_SGD = "plain-sgd"
    PILF = "pilf"

    def validate(self, hp: Hyperparams) -> None:
        if self is OptimizerKind.PILF and (hp.kp is None or hp.ki is None):
            raise ValueError("the pilf optimizer needs both kp and ki")


@dataclass
class PiState:
    """Per-node integral accumulators for the PI-refined optimizer."""

    row_integral: np.ndarray
    col_integral: np.ndarray
    row_pending: np.ndarray
    col_pending: np.ndarray
    row_count: np.ndarray
    col_count: np.ndarray
    epoch: int = 0

    @classmethod
    def zeros(cls, num_rows: int, num_cols: int) -> PiState:
        return cls(
            np.zeros(num_rows), np.zeros(num_cols),
            np.zeros(num_rows), np.zeros(num_cols),
            np.zeros(num_rows, dtype=np.int64), np.zeros(num_cols, dtype=np.int64),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_integral.size, self.col_integral.size

    def copy(self) -> PiState:
        return PiState(
            self.row_integral.copy(), self.col_integral.copy(),
            self.row_pending.copy(), self.col_pending.copy(),
            self.row_count.copy(), self.col_count.copy(), self.epoch,
        )


@dataclass
class EpochStats:
    sse: float
    count: int
    errors: np.ndarray | None = field(default=None, repr=False)
    order: np.ndarray | None = field(default=None, repr=False)


# --- kernels -----------------------------------------------------------------
# rows, cols and vals arrive already gathered in visiting order; order[i] is
# the stored position of the i-th visited entry.

@numba.njit(cache=True, nogil=True)
def _error(x, y, m, n, r):
    acc = 0.0
    for k in range(x.shape[1]):
        acc += x[m, k] * y[n, k]
    return r - acc


@numba.njit(cache=True, nogil=True)
def _update(x, y, m, n, e_row, e_col, eta, lam):
    finite = True
    for k in range(x.shape[1]):
        xk = x[m, k]
        yk = y[n, k]
        xn = xk + eta * (e_row * yk - lam * xk)
        yn = yk + eta * (e_col * xk - lam * yk)
        x[m, k] = xn
        y[n, k] = yn
        if not (np.isfinite(xn) and np.isfinite(yn)):
            finite = False
    return finite


@numba.njit(cache=True, nogil=True)
def _sgd_epoch(x, y, rows, cols, vals, order, eta, lam, errors_out):
    record = errors_out.size > 0
    sse = 0.0
    for i in range(order.size):
        m = rows[i]
        n = cols[i]
        e = _error(x, y, m, n, vals[i])
        if record:
            errors_out[order[i]] = e
        if not _update(x, y, m, n, e, e, eta, lam):
            return sse, order[i]
        sse += e * e
    return sse, -1


@numba.njit(cache=True, nogil=True)
def _pilf_epoch(x, y, rows, cols, vals, order, eta, lam, kp, ki,
                row_integral, col_integral, row_pending, col_pending,
                row_count, col_count, errors_out):
    record = errors_out.size > 0
    sse = 0.0
    for i in range(order.size):
        m = rows[i]
        n = cols[i]
        e = _error(x, y, m, n, vals[i])
        if record:
            errors_out[order[i]] = e
        e_row = kp * e + ki * row_integral[m]
        e_col = kp * e + ki * col_integral[n]
        row_pending[m] += e
        col_pending[n] += e
        row_count[m] += 1
        col_count[n] += 1
        if not _update(x, y, m, n, e_row, e_col, eta, lam):
            return sse, order[i]
        sse += e * e
    return sse, -1


# --- per-instance API ----------------------------------------------------------

def pi_refine_error(state: PiState, hp: Hyperparams, m: int, n: int, e: float) -> tuple[float, float]:
    """PI-refined errors for row ``m`` and column ``n`` from the frozen integrals."""
    kp = 1.0 if hp.kp is None else hp.kp
    ki = 0.0 if hp.ki is None else hp.ki
    return (kp * e + ki * float(state.row_integral[m]),
            kp * e + ki * float(state.col_integral[n]))


def _single(triple: RatingTriple) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (np.array([triple.row], dtype=np.int64), np.array([triple.col], dtype=np.int64),
            np.array([triple.value], dtype=np.float64), np.zeros(1, dtype=np.int64))


_NO_RECORD = np.empty(0)


def plain_sgd_step(factors: LatentFactors, hp: Hyperparams, triple: RatingTriple) -> float:
    """Apply one raw-error SGD update in place; returns the learning error."""
    rows, cols, vals, order = _single(triple)
    errors = np.empty(1)
    _, bad = _sgd_epoch(factors.x, factors.y, rows, cols, vals, order,
                        float(hp.eta), float(hp.lam), errors)
    if bad >= 0:
        raise DivergenceError(0, triple.row, triple.col)
    return float(errors[0])


def pilf_step(factors: LatentFactors, state: PiState, hp: Hyperparams,
              triple: RatingTriple) -> float:
    """Apply one PI-refined update in place and record the raw error as pending."""
    if state.shape != (factors.num_rows, factors.num_cols):
        raise ValueError("PI state does not match the factor dimensions")
    OptimizerKind.PILF.validate(hp)
    rows, cols, vals, order = _single(triple)
    errors = np.empty(1)
    _, bad = _pilf_epoch(factors.x, factors.y, rows, cols, vals, order,
                         float(hp.eta), float(hp.lam), float(hp.kp), float(hp.ki),
                         state.row_integral, state.col_integral,
                         state.row_pending, state.col_pending,
                         state.row_count, state.col_count, errors)
    if bad >= 0:
        raise DivergenceError(state.epoch, triple.row, triple.col)
    return float(errors[0])


def snapshot_accumulators(state: PiState, hp: Hyperparams) -> None:
    """Fold this epoch's per-node errors into the integrals and reset pending."""
    for integral, pending, count in (
        (state.row_integral, state.row_pending, state.row_count),
        (state.col_integral, state.col_pending, state.col_count),
    ):
        seen = count > 0
        if hp.integral_aggregation == "mean":
            integral[seen] += pending[seen] / count[seen]
        else:
            integral[seen] += pending[seen]
        if hp.integral_clamp is not None:
            np.clip(integral, -hp.integral_clamp, hp.integral_clamp, out=integral)
        pending[:] = 0.0
        count[:] = 0
    state.epoch += 1


def epoch_order(train: HdiMatrix, hp: Hyperparams, rng: np.random.Generator | None) -> np.ndarray:
    if hp.shuffle_per_epoch:
        if rng is None:
            raise ValueError("shuffle_per_epoch needs a random generator")
        return rng.permutation(len(train))
    return np.arange(len(train), dtype=np.int64)


def run_epoch(
    factors: LatentFactors,
    state: PiState | None,
    hp: Hyperparams,
    train: HdiMatrix,
    rng: np.random.Generator | None = None,
    *,
    epoch: int | None = None,
    record_errors: bool = False,
) -> EpochStats:
    """One pass over every training entry.

    With ``state`` the PI-refined update is used and the accumulators are
    snapshotted at the end; without it, plain SGD. ``record_errors`` keeps the
    raw error of each entry (indexed by entry position) and the visiting order
    on the returned stats.
    """
    if (factors.num_rows, factors.num_cols) != train.shape:
        raise ValueError(f"factors {factors.num_rows}x{factors.num_cols} "
                         f"do not match matrix {train.shape}")
    order = epoch_order(train, hp, rng)
    errors = np.full(len(train), np.nan) if record_errors else _NO_RECORD
    rows, cols, vals = train.rows[order], train.cols[order], train.values[order]
    if state is None:
        sse, bad = _sgd_epoch(factors.x, factors.y, rows, cols, vals,
                              order, float(hp.eta), float(hp.lam), errors)
        label = 0 if epoch is None else epoch
    else:
        OptimizerKind.PILF.validate(hp)
        if state.shape != train.shape:
            raise ValueError("PI state does not match the matrix dimensions")
        label = state.epoch if epoch is None else epoch
        sse, bad = _pilf_epoch(factors.x, factors.y, rows, cols, vals,
                               order, float(hp.eta), float(hp.lam), float(hp.kp), float(hp.ki),
                               state.row_integral, state.col_integral,
                               state.row_pending, state.col_pending,
                               state.row_count, state.col_count, errors)
    if bad >= 0:
        raise DivergenceError(label, int(train.rows[bad]), int(train.cols[bad]), int(bad))
    if state is not None:
        snapshot_accumulators(state, hp)
    if record_errors:
        return EpochStats(float(sse), len(train), errors, order)
    return EpochStats(float(sse), len(train))


_warmed = False


def warm_up() -> None:
    """Compile (or load from cache) the epoch kernels so timing excludes JIT cost."""
    global _warmed
    if _warmed:
        return
    x = np.full((1, 1), 0.1)
    y = np.full((1, 1), 0.1)
    idx = np.zeros(1, dtype=np.int64)
    vals = np.ones(1)
    _sgd_epoch(x, y, idx, idx, vals, idx, 0.01, 0.0, _NO_RECORD)
    _pilf_epoch(x, y, idx, idx, vals, idx, 0.01, 0.0, 1.0, 0.0,
                np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1),
                np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), _NO_RECORD)
    _warmed = True
