import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference, half_instance_loss, relative_error, replay_integrals

from pilf.data import HdiMatrix, RatingTriple, generate_synthetic
from pilf.model import Hyperparams, LatentFactors, init_factors
from pilf.optimizers import (
    DivergenceError,
    OptimizerKind,
    PiState,
    pi_refine_error,
    pilf_step,
    plain_sgd_step,
    run_epoch,
    snapshot_accumulators,
)


def _state_with(row_integral, col_integral):
    s = PiState.zeros(len(row_integral), len(col_integral))
    s.row_integral[:] = row_integral
    s.col_integral[:] = col_integral
    return s


@pytest.mark.parametrize("kp, ki, e, expected", [
    (1.0, 0.0, 0.7, (0.7, 0.7)),
    (0.5, 0.0, 2.0, (1.0, 1.0)),
    (1.0, 0.1, 1.0, (1.3, 0.8)),
])
def test_pi_refine_error(kp, ki, e, expected):
    state = _state_with([3.0], [-2.0])
    hp = Hyperparams(kp=kp, ki=ki)
    assert pi_refine_error(state, hp, 0, 0, e) == pytest.approx(expected, abs=1e-15)


def test_pi_refine_reads_frozen_integral_not_pending():
    state = _state_with([3.0], [-2.0])
    state.row_pending[0] = 100.0
    state.row_count[0] = 1
    assert pi_refine_error(state, Hyperparams(kp=1.0, ki=0.1), 0, 0, 1.0) == \
        pytest.approx((1.3, 0.8))


def test_pilf_step_hand_example():
    f = LatentFactors(np.array([[0.5]]), np.array([[0.5]]))
    state = PiState.zeros(1, 1)
    hp = Hyperparams(eta=0.1, lam=0.0, rank=1, kp=1.0, ki=0.0)
    e = pilf_step(f, state, hp, RatingTriple(0, 0, 1.0))
    assert e == 0.75
    assert f.x[0, 0] == pytest.approx(0.5375, abs=1e-15)
    assert f.y[0, 0] == pytest.approx(0.5375, abs=1e-15)
    assert state.row_pending[0] == 0.75 and state.col_count[0] == 1


def test_pilf_step_uses_integrals():
    f = LatentFactors(np.array([[0.5]]), np.array([[0.5]]))
    state = _state_with([2.0], [-1.0])
    hp = Hyperparams(eta=0.1, lam=0.0, rank=1, kp=1.0, ki=0.1)
    pilf_step(f, state, hp, RatingTriple(0, 0, 1.0))
    # e = 0.75, e_row = 0.95, e_col = 0.65
    assert f.x[0, 0] == pytest.approx(0.5 + 0.1 * 0.95 * 0.5, abs=1e-15)
    assert f.y[0, 0] == pytest.approx(0.5 + 0.1 * 0.65 * 0.5, abs=1e-15)


def test_pilf_step_negligible_eta_still_accumulates():
    f = init_factors(2, 2, 3, 1.0, seed=0)
    before = f.copy()
    state = PiState.zeros(2, 2)
    # eta must be positive; 1e-300 rounds every update away
    hp = Hyperparams(eta=1e-300, lam=0.0, rank=3, kp=1.0, ki=0.5)
    e = pilf_step(f, state, hp, RatingTriple(1, 0, 4.0))
    assert np.array_equal(f.x, before.x) and np.array_equal(f.y, before.y)
    assert state.row_pending[1] == e and state.col_pending[0] == e
    assert state.row_count.tolist() == [0, 1]


def test_plain_step_zero_error_no_change():
    f = LatentFactors(np.array([[1.0, 2.0]]), np.array([[0.5, 0.25]]))
    before = f.copy()
    plain_sgd_step(f, Hyperparams(eta=0.1, lam=0.0, rank=2), RatingTriple(0, 0, 1.0))
    assert np.array_equal(f.x, before.x) and np.array_equal(f.y, before.y)


def test_plain_step_decay():
    f = LatentFactors(np.array([[1.0, 2.0]]), np.array([[0.5, 0.25]]))
    plain_sgd_step(f, Hyperparams(eta=0.1, lam=1.0, rank=2), RatingTriple(0, 0, 1.0))
    np.testing.assert_allclose(f.x, [[0.9, 1.8]], rtol=1e-15)
    np.testing.assert_allclose(f.y, [[0.45, 0.225]], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0, 1), eta=st.floats(1e-4, 0.5))
def test_plain_equals_pilf_with_unit_gain(seed, lam, eta):
    rng = np.random.default_rng(seed)
    a = LatentFactors(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))
    b = a.copy()
    state = _state_with(rng.normal(size=3), rng.normal(size=2))
    triple = RatingTriple(2, 1, float(rng.normal()))
    plain_sgd_step(a, Hyperparams(eta=eta, lam=lam, rank=4), triple)
    pilf_step(b, state, Hyperparams(eta=eta, lam=lam, rank=4, kp=1.0, ki=0.0), triple)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_simultaneous_update_order_free():
    # swapping the roles of rows and columns must mirror the result exactly
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    a = LatentFactors(x.copy(), y.copy())
    b = LatentFactors(y.copy(), x.copy())
    hp = Hyperparams(eta=0.2, lam=0.1, rank=3)
    plain_sgd_step(a, hp, RatingTriple(0, 0, 1.5))
    plain_sgd_step(b, hp, RatingTriple(0, 0, 1.5))
    assert np.array_equal(a.x, b.y) and np.array_equal(a.y, b.x)


def test_step_direction_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, y = rng.normal(size=4), rng.normal(size=4)
        r, lam = float(rng.normal()), float(rng.uniform(0, 1))
        f = LatentFactors(x[None, :].copy(), y[None, :].copy())
        plain_sgd_step(f, Hyperparams(eta=1.0, lam=lam, rank=4), RatingTriple(0, 0, r))
        gx = central_difference(lambda v: half_instance_loss(v, y, r, lam), x)
        gy = central_difference(lambda v: half_instance_loss(x, v, r, lam), y)
        assert relative_error(f.x[0] - x, -gx) < 1e-5
        assert relative_error(f.y[0] - y, -gy) < 1e-5


def test_snapshot_examples():
    hp_sum = Hyperparams(integral_aggregation="sum")
    s = _state_with([1.0, 7.0], [0.0])
    s.row_pending[0] = 2.5
    s.row_count[0] = 1
    snapshot_accumulators(s, hp_sum)
    assert s.row_integral.tolist() == [3.5, 7.0]
    assert s.epoch == 1
    assert not s.row_pending.any() and not s.row_count.any()

    s = PiState.zeros(1, 1)
    s.row_pending[0] = 3.0
    s.row_count[0] = 4
    snapshot_accumulators(s, Hyperparams(integral_aggregation="mean"))
    assert s.row_integral[0] == 0.75
    assert s.col_integral[0] == 0.0


def test_snapshot_clamp():
    s = PiState.zeros(2, 1)
    s.row_pending[:] = [10.0, -10.0]
    s.row_count[:] = 1
    snapshot_accumulators(s, Hyperparams(integral_aggregation="sum", integral_clamp=2.0))
    assert s.row_integral.tolist() == [2.0, -2.0]


def test_run_epoch_visits_each_entry_once(small_synthetic):
    matrix, _ = small_synthetic
    hp = Hyperparams(rank=2, kp=1.0, ki=0.1)
    f = init_factors(*matrix.shape, 2, seed=0)
    state = PiState.zeros(*matrix.shape)
    stats = run_epoch(f, state, hp, matrix, np.random.default_rng(0), record_errors=True)
    assert stats.count == len(matrix)
    assert sorted(stats.order.tolist()) == list(range(len(matrix)))
    assert not np.isnan(stats.errors).any()
    assert stats.sse == pytest.approx(float(np.sum(stats.errors ** 2)), rel=1e-12)
    assert state.epoch == 1


def test_run_epoch_unshuffled_is_reproducible(small_synthetic):
    matrix, _ = small_synthetic
    hp = Hyperparams(rank=2, kp=1.0, ki=0.0, shuffle_per_epoch=False)
    runs = []
    for _ in range(2):
        f = init_factors(*matrix.shape, 2, seed=4)
        for _ in range(2):
            run_epoch(f, PiState.zeros(*matrix.shape), hp, matrix)
        runs.append(f)
    assert np.array_equal(runs[0].x, runs[1].x) and np.array_equal(runs[0].y, runs[1].y)


def test_run_epoch_state_presence_checks(small_synthetic):
    matrix, _ = small_synthetic
    f = init_factors(*matrix.shape, 2)
    with pytest.raises(ValueError, match="kp and ki"):
        run_epoch(f, PiState.zeros(*matrix.shape), Hyperparams(rank=2), matrix,
                  np.random.default_rng(0))
    with pytest.raises(ValueError, match="random generator"):
        run_epoch(f, None, Hyperparams(rank=2), matrix)
    with pytest.raises(ValueError, match="do not match"):
        run_epoch(init_factors(3, 3, 2), None, Hyperparams(rank=2), matrix,
                  np.random.default_rng(0))


def test_training_sse_decreases_noiseless_rank_one():
    matrix, _ = generate_synthetic(60, 50, 1, 0.3, 0.0, seed=2)
    hp = Hyperparams(eta=0.01, lam=0.0, rank=1)
    f = init_factors(*matrix.shape, 1, seed=0)
    rng = np.random.default_rng(0)
    sse = [run_epoch(f, None, hp, matrix, rng).sse for _ in range(10)]
    assert all(b < a for a, b in zip(sse, sse[1:]))


@pytest.mark.parametrize("aggregation, clamp", [("mean", None), ("sum", None),
                                                ("mean", 0.05), ("sum", 0.5)])
def test_accumulators_match_replay(aggregation, clamp):
    matrix, _ = generate_synthetic(40, 30, 3, 0.4, 0.05, seed=6)
    hp = Hyperparams(eta=0.02, lam=0.01, rank=3, kp=0.9, ki=0.05,
                     integral_aggregation=aggregation, integral_clamp=clamp)
    f = init_factors(*matrix.shape, 3, 0.1, seed=1)
    state = PiState.zeros(*matrix.shape)
    rng = np.random.default_rng(3)
    epochs = []
    for _ in range(8):
        stats = run_epoch(f, state, hp, matrix, rng, record_errors=True)
        epochs.append((stats.errors, stats.order))
        rows = replay_integrals(matrix.rows, epochs, matrix.num_rows, aggregation, clamp)
        cols = replay_integrals(matrix.cols, epochs, matrix.num_cols, aggregation, clamp)
        assert relative_error(state.row_integral, rows) < 1e-12
        assert relative_error(state.col_integral, cols) < 1e-12
        if clamp is not None:
            assert np.abs(state.row_integral).max() <= clamp
            assert np.abs(state.col_integral).max() <= clamp


def test_untouched_nodes_keep_initialization():
    matrix = HdiMatrix(4, 4, [0, 0, 1], [0, 1, 1], [1.0, 2.0, 3.0])
    hp = Hyperparams(eta=0.05, lam=0.5, rank=2, kp=1.0, ki=0.3)
    f = init_factors(4, 4, 2, 0.1, seed=0)
    init = f.copy()
    state = PiState.zeros(4, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        run_epoch(f, state, hp, matrix, rng)
    assert np.array_equal(f.x[2:], init.x[2:])
    assert np.array_equal(f.y[2:], init.y[2:])
    assert not np.array_equal(f.x[0], init.x[0])
    assert state.row_integral[2] == 0.0 and state.col_integral[3] == 0.0


def test_divergence_raises_with_location():
    matrix = HdiMatrix(2, 2, [0, 1], [0, 1], [1e200, 1e200])
    f = init_factors(2, 2, 2, 1.0, seed=0)
    hp = Hyperparams(eta=1e150, lam=0.0, rank=2, shuffle_per_epoch=False)
    with pytest.raises(DivergenceError) as info:
        run_epoch(f, None, hp, matrix, epoch=7)
    assert info.value.epoch == 7
    assert (info.value.row, info.value.col) == (0, 0)
    assert "epoch 7" in str(info.value)


def test_pilf_divergence_reports_state_epoch():
    matrix = HdiMatrix(2, 2, [0, 1], [0, 1], [1e200, 1e200])
    hp = Hyperparams(eta=1e150, lam=0.0, rank=2, kp=1.0, ki=0.0, shuffle_per_epoch=False)
    state = PiState.zeros(2, 2)
    state.epoch = 3
    with pytest.raises(DivergenceError, match="epoch 3"):
        run_epoch(init_factors(2, 2, 2, 1.0), state, hp, matrix)


def test_optimizer_kind():
    assert OptimizerKind("pilf") is OptimizerKind.PILF
    OptimizerKind.PLAIN_SGD.validate(Hyperparams())
    with pytest.raises(ValueError):
        OptimizerKind.PILF.validate(Hyperparams(kp=1.0))
