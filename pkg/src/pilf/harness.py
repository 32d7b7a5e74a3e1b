"""Experiment orchestration: training loop, early stopping, csv output, gain sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import HdiMatrix, SplitSpec, generate_synthetic, parse_ratings, split_ratings
from .metrics import EpochReport, check_convergence, evaluate
from .model import Hyperparams, LatentFactors, init_factors
from .optimizers import DivergenceError, OptimizerKind, PiState, run_epoch, warm_up

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_sse", "val_rmse", "val_mae", "elapsed_seconds")
SWEEP_HEADER = ("kp", "ki", "best_rmse", "best_mae", "epochs_to_best",
                "seconds_to_best", "diverged")


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    data_format: str = "movielens-dat"
    split: SplitSpec = field(default_factory=SplitSpec)
    optimizer: OptimizerKind = OptimizerKind.PLAIN_SGD
    hp: Hyperparams = field(default_factory=Hyperparams)
    output_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        self.optimizer = OptimizerKind(self.optimizer)
        self.optimizer.validate(self.hp)


@dataclass
class SweepConfig:
    base: ExperimentConfig
    kp_values: Sequence[float]
    ki_values: Sequence[float]
    workers: int | None = None
    cell_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.kp_values or not self.ki_values:
            raise ValueError("sweep needs at least one kp and one ki value")

    def grid(self) -> list[tuple[float, float]]:
        return list(itertools.product(self.kp_values, self.ki_values))


@dataclass
class TrainingResult:
    history: list[EpochReport]
    best: EpochReport | None
    factors: LatentFactors | None
    converged: bool
    seconds_total: float
    divergence: DivergenceError | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None


@dataclass
class ExperimentResult:
    """Best-validation epoch plus its test-set metrics."""

    final: EpochReport
    history: list[EpochReport]
    test_rmse: float
    test_mae: float
    converged: bool
    seconds_total: float
    factors: LatentFactors

    @property
    def epochs_to_best(self) -> int:
        return self.final.epoch

    @property
    def seconds_to_best(self) -> float:
        return self.final.elapsed_seconds


def train(
    train_set: HdiMatrix,
    val_set: HdiMatrix,
    optimizer: OptimizerKind | str,
    hp: Hyperparams,
    *,
    on_epoch: Callable[[EpochReport], None] | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> TrainingResult:
    """Train until the stopping rule fires or ``hp.max_epochs`` is reached.

    Validation metrics are computed after every epoch. The factors at the
    lowest validation RMSE are kept. Divergence ends training early and is
    reported on the result instead of raised.
    """
    optimizer = OptimizerKind(optimizer)
    optimizer.validate(hp)
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    factors = init_factors(train_set.num_rows, train_set.num_cols, hp.rank,
                           hp.init_scale, hp.seed)
    state = PiState.zeros(*train_set.shape) if optimizer is OptimizerKind.PILF else None
    rng = np.random.default_rng([hp.seed, 1])
    warm_up()

    history: list[EpochReport] = []
    best: EpochReport | None = None
    best_factors: LatentFactors | None = None
    elapsed = 0.0
    converged = False
    divergence = None
    for epoch in range(1, hp.max_epochs + 1):
        start = clock()
        try:
            stats = run_epoch(factors, state, hp, train_set, rng, epoch=epoch)
        except DivergenceError as exc:
            divergence = exc
            log.warning("%s", exc)
            break
        elapsed += clock() - start

        val_rmse, val_mae = evaluate(factors, val_set)
        report = EpochReport(epoch, stats.sse, val_rmse, val_mae, elapsed)
        history.append(report)
        if on_epoch is not None:
            on_epoch(report)
        if best is None or val_rmse < best.val_rmse:
            best = report
            best_factors = factors.copy()
        if check_convergence(history, hp.conv_threshold, hp.conv_patience):
            converged = True
            break
    return TrainingResult(history, best, best_factors, converged, elapsed, divergence)


def load_dataset(config: ExperimentConfig) -> HdiMatrix:
    if config.data_path is None:
        raise ValueError("no data path configured")
    if config.data_format == "synthetic":
        return synthetic_from_spec(config.data_path)
    return parse_ratings(config.data_path, config.data_format)


_SYNTH_RE = re.compile(r"^\s*(\d+)\s*x\s*(\d+)\s*((?:,\s*\w+\s*=\s*[^,]+)*)\s*$")


def synthetic_from_spec(text: str) -> HdiMatrix:
    """``"200x150,rank=3,density=0.2,noise=0,seed=7"`` -> generated matrix."""
    match = _SYNTH_RE.match(text)
    if not match:
        raise ValueError(f"bad synthetic spec {text!r}; expected ROWSxCOLS[,key=value...]")
    options = {"rank": "3", "density": "0.1", "noise": "0", "seed": "0"}
    for item in filter(None, (p.strip() for p in match.group(3).split(","))):
        key, _, value = item.partition("=")
        if key.strip() not in options:
            raise ValueError(f"unknown synthetic option {key.strip()!r}")
        options[key.strip()] = value.strip()
    matrix, _ = generate_synthetic(
        int(match.group(1)), int(match.group(2)), int(options["rank"]),
        float(options["density"]), float(options["noise"]), int(options["seed"]),
    )
    return matrix


def run_experiment(config: ExperimentConfig, data: HdiMatrix | None = None) -> ExperimentResult:
    """Load, split, train and report; writes the metrics csv when configured.

    Raises :class:`DivergenceError` (after writing the partial history) if
    training blows up.
    """
    matrix = load_dataset(config) if data is None else data
    train_set, val_set, test_set = split_ratings(matrix, config.split)
    if len(test_set) == 0:
        raise ValueError("test set is empty; adjust the split fractions")
    result = train(train_set, val_set, config.optimizer, config.hp)
    if config.output_path is not None:
        emit_metrics_csv(result.history, config.output_path)
    if result.diverged:
        raise result.divergence
    assert result.best is not None and result.factors is not None
    if config.checkpoint_path is not None:
        result.factors.save_csv(config.checkpoint_path)
    test_rmse, test_mae = evaluate(result.factors, test_set)
    return ExperimentResult(result.best, result.history, test_rmse, test_mae,
                            result.converged, result.seconds_total, result.factors)


@dataclass(frozen=True)
class SweepRow:
    kp: float
    ki: float
    best_rmse: float
    best_mae: float
    epochs_to_best: int
    seconds_to_best: float
    diverged: bool
    history: tuple[EpochReport, ...] = field(default=(), compare=False, repr=False)


def sweep_gains(
    config: SweepConfig, data: HdiMatrix | None = None, output_path: str | None = None,
) -> list[SweepRow]:
    """Train one PI-refined model per (kp, ki) pair, concurrently.

    Every cell shares the same immutable split and owns its factors and
    accumulators. ``best_rmse``/``best_mae`` are test metrics at the cell's
    best-validation epoch; a diverged cell reports its best epoch before the
    blow-up (NaN when there was none) with ``diverged`` set.
    """
    base = config.base
    matrix = load_dataset(base) if data is None else data
    train_set, val_set, test_set = split_ratings(matrix, base.split)

    def cell(gains: tuple[float, float]) -> SweepRow:
        kp, ki = gains
        hp = replace(base.hp, kp=float(kp), ki=float(ki))
        result = train(train_set, val_set, OptimizerKind.PILF, hp)
        if config.cell_dir is not None:
            os.makedirs(config.cell_dir, exist_ok=True)
            emit_metrics_csv(result.history,
                             os.path.join(config.cell_dir, f"kp{kp:g}_ki{ki:g}.csv"))
        if result.best is None:
            return SweepRow(kp, ki, math.nan, math.nan, 0, math.nan, True)
        test_rmse, test_mae = evaluate(result.factors, test_set)
        return SweepRow(kp, ki, test_rmse, test_mae, result.best.epoch,
                        result.best.elapsed_seconds, result.diverged,
                        tuple(result.history))

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        rows = list(pool.map(cell, config.grid()))
    out = output_path if output_path is not None else base.output_path
    if out is not None:
        emit_sweep_csv(rows, out)
    return rows


def _fmt(value: float) -> str:
    return repr(float(value))


def emit_metrics_csv(history: Iterable[EpochReport], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in history:
                writer.writerow([r.epoch, _fmt(r.train_sse), _fmt(r.val_rmse),
                                 _fmt(r.val_mae), _fmt(r.elapsed_seconds)])
    except OSError as exc:
        raise OSError(f"cannot write metrics csv {os.fspath(path)!r}: {exc}") from exc


def read_metrics_csv(path: str | os.PathLike) -> list[EpochReport]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [EpochReport(int(row[0]), *map(float, row[1:])) for row in reader]


def emit_sweep_csv(rows: Iterable[SweepRow], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            for r in rows:
                writer.writerow([_fmt(r.kp), _fmt(r.ki), _fmt(r.best_rmse), _fmt(r.best_mae),
                                 r.epochs_to_best, _fmt(r.seconds_to_best), int(r.diverged)])
    except OSError as exc:
        raise OSError(f"cannot write sweep csv {os.fspath(path)!r}: {exc}") from exc
