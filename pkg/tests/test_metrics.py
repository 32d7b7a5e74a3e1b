import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_metrics

from pilf.data import HdiMatrix
from pilf.metrics import EpochReport, best_epoch, check_convergence, evaluate, mae, rmse
from pilf.model import LatentFactors, init_factors


def _constant_factors(rows, cols, value):
    # rank-1 factors predicting `value` everywhere
    return LatentFactors(np.full((rows, 1), value), np.ones((cols, 1)))


def test_perfect_predictions(small_synthetic):
    matrix, truth = small_synthetic
    assert rmse(truth, matrix) < 1e-12
    assert mae(truth, matrix) < 1e-12


def test_symmetric_errors():
    m = HdiMatrix(1, 2, [0, 0], [0, 1], [1.5, 0.5])
    f = _constant_factors(1, 2, 1.0)
    assert rmse(f, m) == 0.5
    assert mae(f, m) == 0.5


def test_single_entry_constant_prediction():
    m = HdiMatrix(1, 1, [0], [0], [4.0])
    f = _constant_factors(1, 1, 2.75)
    assert rmse(f, m) == 1.25
    assert mae(f, m) == 1.25


def test_empty_eval_set():
    m = HdiMatrix(2, 2, [], [], [])
    with pytest.raises(ValueError, match="empty"):
        rmse(init_factors(2, 2, 1), m)


def test_dense_bruteforce_agreement():
    rng = np.random.default_rng(8)
    for _ in range(20):
        rows, cols = rng.integers(1, 21, size=2)
        mask = rng.random((rows, cols)) < 0.5
        mask[rng.integers(rows), rng.integers(cols)] = True
        dense = rng.uniform(1, 5, size=(rows, cols))
        r, c = np.nonzero(mask)
        matrix = HdiMatrix(rows, cols, r, c, dense[r, c])
        f = init_factors(rows, cols, 4, 1.0, seed=int(rng.integers(10_000)))
        expected_rmse, expected_mae = dense_metrics(dense, mask, f.x, f.y)
        assert abs(rmse(f, matrix) - expected_rmse) <= 1e-12
        assert abs(mae(f, matrix) - expected_mae) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance_and_power_mean(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    rows = rng.permutation(60)[:n]
    values = rng.normal(size=n) * 3
    f = LatentFactors(rng.normal(size=(60, 2)), rng.normal(size=(1, 2)))
    m = HdiMatrix(60, 1, rows, np.zeros(n, dtype=int), values)
    perm = rng.permutation(n)
    shuffled = HdiMatrix(60, 1, rows[perm], np.zeros(n, dtype=int), values[perm])
    assert rmse(f, m) == pytest.approx(rmse(f, shuffled), rel=1e-14)
    assert mae(f, m) == pytest.approx(mae(f, shuffled), rel=1e-14)
    assert mae(f, m) <= rmse(f, m) * (1 + 1e-12)


def test_rmse_squared_times_count_is_sse():
    rng = np.random.default_rng(0)
    n = 200_000
    rows = np.arange(n)
    m = HdiMatrix(n, 1, rows, np.zeros(n, dtype=int), rng.normal(3.5, 1.0, size=n))
    f = LatentFactors(rng.uniform(0, 1, size=(n, 3)), rng.uniform(0, 1, size=(1, 3)))
    res = m.values - f.predict_entries(m.rows, m.cols)
    sse = math.fsum((res * res).tolist())
    assert rmse(f, m) ** 2 * n == pytest.approx(sse, rel=1e-9)
    assert evaluate(f, m) == (rmse(f, m), mae(f, m))


def _reports(values):
    return [EpochReport(i + 1, 0.0, v, v / 2, float(i)) for i, v in enumerate(values)]


@pytest.mark.parametrize("history, expected", [
    ([0.9, 0.8, 0.7, 0.6], False),
    ([0.5, 0.5, 0.5], True),
    ([0.5, 0.5], False),
    ([0.80, 0.79, 0.78999, 0.78999], True),
    ([0.80, 0.79, 0.78, 0.7799999], False),
    ([0.8, 0.9, 0.95], True),
    ([], False),
])
def test_check_convergence(history, expected):
    assert check_convergence(_reports(history), 1e-5, 2) is expected
    assert check_convergence(history, 1e-5, 2) is expected


def test_convergence_patience_one():
    assert check_convergence([0.5, 0.5], 1e-5, 1)
    with pytest.raises(ValueError):
        check_convergence([0.5], 1e-5, 0)


def test_best_epoch_earliest_tie():
    reports = _reports([0.9, 0.7, 0.8, 0.7])
    assert best_epoch(reports).epoch == 2
