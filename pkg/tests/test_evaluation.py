import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msdcn.data import generate_synthetic, make_windows, prepare
from msdcn.evaluation import CONV_GRID, AR_GRID, evaluate, format_table, mae, mse, run_ablation_grid
from msdcn.model import ModelConfig, forward, init_parameters, with_flags, zero_parameters
from msdcn.training import TrainConfig

from oracles import persistence_metrics

SMALL = ModelConfig(lookback=24, horizon=8, n_vars=2, n_long=1, n_short=1, k_long=5, k_short=3)


def test_metric_examples():
    x = np.array([1.0, -2.0, 3.5])
    assert mse(x, x) == 0 and mae(x, x) == 0
    assert mse([0, 0], [1, 3]) == 5
    assert mae([0, 0], [1, 3]) == 2
    assert mse([2], [0]) == 4
    assert mae([-1], [1]) == 2


def test_metric_errors():
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mae([1, 2], [1])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_mae_squared_bounded_by_mse(r):
    r = np.array(r)
    z = np.zeros_like(r)
    assert mse(r, z) >= 0 and mae(r, z) >= 0
    assert mae(r, z) ** 2 <= mse(r, z) * (1 + 1e-12) + 1e-300


def _data():
    ds = generate_synthetic([12, 40], [1.0, 0.5], 0.001, 0.1, 800, SMALL.n_vars, seed=3)
    return prepare(ds, (0.7, 0.1, 0.2), SMALL.lookback, SMALL.horizon)


def test_zero_model_is_persistence():
    data = _data()
    rep = evaluate(zero_parameters(SMALL), SMALL, data.test, batch_size=37)
    ref_mse, ref_mae = persistence_metrics(data.dataset.values, data.test.target_starts, SMALL.horizon)
    assert rep.mse == pytest.approx(ref_mse, abs=1e-6)
    assert rep.mae == pytest.approx(ref_mae, abs=1e-6)
    assert rep.n_windows == len(data.test)


def test_perfect_single_window():
    # a constant series makes persistence exact
    v = np.full((40, SMALL.n_vars), 2.5)
    stream = make_windows(v, range(0, 40), SMALL.lookback, SMALL.horizon).subset([0])
    rep = evaluate(zero_parameters(SMALL), SMALL, stream)
    assert rep.mse == 0 and rep.mae == 0 and rep.n_windows == 1


def test_evaluate_deterministic_and_batch_independent():
    data = _data()
    p = init_parameters(SMALL, seed=2, dtype=np.float64)
    a = evaluate(p, SMALL, data.test, dataset="s", seed=2)
    b = evaluate(p, SMALL, data.test, dataset="s", seed=2)
    assert (a.mse, a.mae) == (b.mse, b.mae)
    c = evaluate(p, SMALL, data.test, batch_size=13)
    assert c.mse == pytest.approx(a.mse, rel=1e-12)
    assert a.config_hash == SMALL.config_hash() and a.flags == {"long": True, "short": True, "ar": True}


def test_evaluate_empty():
    data = _data()
    with pytest.raises(ValueError):
        evaluate(zero_parameters(SMALL), SMALL, data.test.subset([]))


def test_ablated_branch_contributes_zero():
    data = _data()
    p = init_parameters(SMALL, seed=1)
    x = data.test.take(np.arange(16)).inputs.astype(np.float32)
    full = forward(p, SMALL, x)
    no_ar = forward(p, with_flags(SMALL, use_ar=False), x)
    ar_only = forward(p, with_flags(SMALL, use_long=False, use_short=False), x)
    assert not no_ar.y_h.any() and not ar_only.y_c.any()
    np.testing.assert_allclose(no_ar.y_hat + ar_only.y_h, full.y_hat, atol=1e-6)


def test_ablation_grid_mechanics():
    data = _data()
    tcfg = TrainConfig(max_epochs=2, batch_size=32, seed=0)
    results = run_ablation_grid(SMALL, tcfg, data, "conv")
    reports = [r for r, _ in results]
    marks = [(r.flags["long"], r.flags["short"]) for r in reports]
    assert marks == [(False, False), (True, False), (False, True), (True, True)]
    assert len({r.mse for r in reports}) == 4
    kernels = [p.blocks[0].kernel.tobytes() for _, p in results]
    assert kernels[0] == kernels[2] and kernels[1] != kernels[0]
    table = format_table(reports)
    assert len(table.splitlines()) == 5 and "✓" in table and "×" in table
    # the AR-only row has an exactly-zero conv branch
    _, p_ar = results[0]
    fc = forward(p_ar, with_flags(SMALL, **CONV_GRID[0]), data.test.take([0]).inputs.astype(np.float32))
    assert not fc.y_c.any()


def test_ar_grid_rows():
    flags = [(g["use_long"] or g["use_short"], g["use_ar"]) for g in AR_GRID]
    assert flags == [(False, True), (True, False), (True, True)]


def test_grid_errors():
    data = _data()
    with pytest.raises(ValueError):
        run_ablation_grid(SMALL, TrainConfig(), data, [])
    with pytest.raises(ValueError):
        run_ablation_grid(SMALL, TrainConfig(), data,
                          [{"use_long": False, "use_short": False, "use_ar": False}])
