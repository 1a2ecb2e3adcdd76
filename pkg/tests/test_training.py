import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdcn.data import WindowStream, generate_synthetic, prepare
from msdcn.evaluation import evaluate
from msdcn.kernels import Tape, backward
from msdcn.model import ModelConfig, init_parameters, predict
from msdcn.training import (AdamState, TrainConfig, TrainingError, adam_step, evaluate_loss,
                            huber_grad, huber_loss, train, train_step)

from oracles import central_difference, huber_reference, max_relative_error, persistence_metrics

SMALL = ModelConfig(lookback=24, horizon=8, n_vars=2, n_long=1, n_short=1, k_long=5, k_short=3)


# ---------------------------------------------------------------------------
# Huber

class TestHuber:
    def test_zero_residual(self):
        assert huber_loss(np.ones(5), np.ones(5), 1.0) == 0.0
        assert not huber_grad(np.ones(5), np.ones(5), 1.0).any()

    def test_threshold_continuity(self):
        assert huber_loss(np.array([0.0]), np.array([1.0]), 1.0) == 0.5
        assert 0.5 * 1.0 ** 2 == 1.0 * (1.0 - 0.5 * 1.0)

    def test_linear_branch(self):
        assert huber_loss(np.array([0.0]), np.array([2.0]), 1.0) == 1.5
        # prediction two above the target: clipped gradient +delta
        assert huber_grad(np.array([2.0]), np.array([0.0]), 1.0).item() == 1.0
        assert huber_grad(np.array([0.0]), np.array([2.0]), 1.0).item() == -1.0

    def test_bad_delta(self):
        for d in (0.0, -1.0):
            with pytest.raises(ValueError):
                huber_loss(np.zeros(2), np.ones(2), d)
            with pytest.raises(ValueError):
                huber_grad(np.zeros(2), np.ones(2), d)
        with pytest.raises(ValueError):
            huber_loss(np.zeros(2), np.ones(3), 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0.1, 3.0))
    def test_matches_reference(self, r, delta):
        pred = np.zeros(len(r))
        target = np.array(r)
        assert huber_loss(pred, target, delta) == pytest.approx(huber_reference(pred, target, delta),
                                                               rel=1e-12, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0.1, 3.0))
    def test_gradient_bound(self, r, delta):
        g = huber_grad(np.zeros(len(r)), np.array(r), delta)
        assert np.all(np.abs(g) <= delta / len(r) + 1e-15)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=40) * 2
        pred = rng.normal(size=40)
        # keep every residual well away from the kink
        r = target - pred
        pred = np.where(np.abs(np.abs(r) - 1.0) < 0.05, pred + 0.2, pred)
        numeric = central_difference(lambda a: huber_loss(a["p"], target, 1.0), {"p": pred.copy()})
        assert max_relative_error({"p": huber_grad(pred, target, 1.0)}, numeric) < 1e-6

    def test_kink_one_sided_derivatives(self):
        h = 1e-7
        f = lambda p: huber_loss(np.array([p]), np.array([1.0]), 1.0)
        left = (f(0.0) - f(-h)) / h
        right = (f(h) - f(0.0)) / h
        assert abs(abs(left) - abs(right)) < 1e-6

    def test_large_delta_is_half_mse(self):
        rng = np.random.default_rng(1)
        pred, target = rng.normal(size=100), rng.normal(size=100) * 3
        mse = np.mean((target - pred) ** 2)
        assert abs(2 * huber_loss(pred, target, 1e6) - mse) / mse < 1e-9

    def test_taped(self):
        rng = np.random.default_rng(2)
        pred, target = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) * 2
        tape = Tape()
        P = tape.param("p", pred)
        loss = huber_loss(P, target, 0.7)
        assert float(loss.value) == huber_loss(pred, target, 0.7)
        np.testing.assert_array_equal(backward(tape, loss)["p"], huber_grad(pred, target, 0.7))


# ---------------------------------------------------------------------------
# Adam

class TestAdam:
    def cfg(self, **kw):
        return TrainConfig(**kw)

    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, st_ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), self.cfg())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert st_.step == 1

    @pytest.mark.parametrize("g", [3.0, -0.01, 250.0])
    def test_first_step_magnitude(self, g):
        p = {"w": np.array([0.5])}
        cfg = self.cfg(learning_rate=0.01, adam_eps=1e-300)
        new, _ = adam_step(p, {"w": np.array([g])}, AdamState.zeros_like(p), cfg)
        step = new["w"][0] - 0.5
        assert step == pytest.approx(-np.sign(g) * 0.01, rel=1e-12)

    def test_monotone_under_constant_gradient(self):
        p = {"w": np.array([0.0])}
        st_ = AdamState.zeros_like(p)
        cfg = self.cfg()
        trail = [0.0]
        for _ in range(2):
            p, st_ = adam_step(p, {"w": np.array([0.4])}, st_, cfg)
            trail.append(p["w"][0])
        assert trail[0] > trail[1] > trail[2]

    def test_second_moment_non_negative(self):
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=10)}
        st_ = AdamState.zeros_like(p)
        for _ in range(5):
            p, st_ = adam_step(p, {"w": rng.normal(size=10)}, st_, self.cfg())
            assert np.all(st_.v["w"] >= 0)

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(p, {"w": np.zeros(3)}, AdamState.zeros_like(p), self.cfg())
        with pytest.raises(ValueError):
            adam_step(p, {"v": np.zeros(2)}, AdamState.zeros_like(p), self.cfg())

    def test_inputs_untouched(self):
        p = {"w": np.ones(3)}
        st_ = AdamState.zeros_like(p)
        adam_step(p, {"w": np.ones(3)}, st_, self.cfg())
        assert np.all(p["w"] == 1) and not st_.m["w"].any() and st_.step == 0


def test_train_config_invariants():
    for kw in ({"adam_beta1": 1.0}, {"adam_beta2": 0.0}, {"patience": 0}, {"huber_delta": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# ---------------------------------------------------------------------------
# loop

def small_task(n_obs=800, **kw):
    task = dict(periods=[12, 40], amplitudes=[1.0, 0.5], slope=0.001, noise=0.1, n_obs=n_obs,
                n_vars=SMALL.n_vars, seed=0)
    task.update(kw)
    return prepare(generate_synthetic(**task), (0.7, 0.1, 0.2), SMALL.lookback, SMALL.horizon)


def test_determinism(tmp_path):
    data = small_task()
    tcfg = TrainConfig(max_epochs=3, batch_size=16, seed=4)
    p1, h1 = train(SMALL, tcfg, data.train, data.val, checkpoint_path=tmp_path / "a.st")
    p2, h2 = train(SMALL, tcfg, data.train, data.val, checkpoint_path=tmp_path / "b.st")
    assert h1.losses() == h2.losses()
    for k, v in p1.arrays().items():
        assert v.tobytes() == p2.arrays()[k].tobytes()
    assert (tmp_path / "a.st").read_bytes() == (tmp_path / "b.st").read_bytes()
    _, h3 = train(SMALL, TrainConfig(max_epochs=3, batch_size=16, seed=5), data.train, data.val)
    assert h3.train_loss != h1.train_loss


def test_early_stopping_returns_best(tmp_path):
    data = small_task()
    tcfg = TrainConfig(max_epochs=30, batch_size=16, learning_rate=3e-2, patience=2)
    metrics = tmp_path / "m.jsonl"
    best, hist = train(SMALL, tcfg, data.train, data.val, metrics_path=metrics)
    assert hist.best_epoch == int(np.argmin(hist.val_loss))
    assert len(hist.val_loss) <= hist.best_epoch + 1 + tcfg.patience
    assert len(hist.val_loss) < tcfg.max_epochs
    assert evaluate_loss(best, SMALL, data.val, tcfg.huber_delta) == pytest.approx(
        min(hist.val_loss), rel=1e-12)
    lines = metrics.read_text().splitlines()
    assert len(lines) == len(hist.val_loss)
    assert all(set(__import__("json").loads(l)) == {"epoch", "train_loss", "val_loss", "seconds"}
               for l in lines)


def test_linear_trend_beats_persistence():
    ds = generate_synthetic([], [], slope=0.01, noise=0.0, n_obs=600, n_vars=SMALL.n_vars)
    data = prepare(ds, (0.7, 0.1, 0.2), SMALL.lookback, SMALL.horizon)
    params, _ = train(SMALL, TrainConfig(max_epochs=15, batch_size=16, learning_rate=3e-3),
                      data.train, data.val)
    rep = evaluate(params, SMALL, data.test)
    base_mse, _ = persistence_metrics(data.dataset.values, data.test.target_starts, SMALL.horizon)
    assert rep.mse < base_mse


def test_persistence_target_drives_loss_to_zero():
    # Every target equals the last input value: zero parameters are optimal.
    rng = np.random.default_rng(0)
    walk = np.cumsum(rng.normal(size=(500, SMALL.n_vars)), axis=0)
    T, L = SMALL.lookback, SMALL.horizon
    starts = np.arange(T, 500 - L + 1)

    class Flat(WindowStream):
        def take(self, idx):
            b = super().take(idx)
            b.targets[:] = b.inputs[:, :, -1:]
            return b

    train_s = Flat(walk, starts[:300], T, L)
    val_s = Flat(walk, starts[300:], T, L)
    params, hist = train(SMALL, TrainConfig(max_epochs=8, batch_size=16), train_s, val_s)
    assert hist.val_loss[hist.best_epoch] < 0.2 * hist.val_loss[0]
    b = val_s.take(np.arange(len(val_s)))
    y = predict(params, SMALL, b.inputs.astype(np.float32))
    corr = y - b.inputs[:, :, -1:]
    assert abs(float(corr.mean())) < 0.05


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_batch_loss_non_increasing(seed):
    cfg = ModelConfig(seed=seed)
    ds = generate_synthetic([24, 168], [1.0, 0.5], 0.001, 0.1, 2000, cfg.n_vars, seed=seed)
    data = prepare(ds, (0.7, 0.1, 0.2), cfg.lookback, cfg.horizon)
    batch = data.train.take(np.arange(32) * 7)
    x, y = batch.inputs.astype(np.float32), batch.targets.astype(np.float32)
    params = init_parameters(cfg)
    tcfg = TrainConfig(learning_rate=1e-3)
    state = AdamState.zeros_like(params.trainable())
    losses = []
    for _ in range(10):
        params, state, loss = train_step(params, cfg, x, y, state, tcfg)
        losses.append(loss)
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_non_finite_loss_diagnostic():
    data = small_task()
    bad = init_parameters(SMALL).replace_arrays({"ar_W2": np.full((SMALL.horizon, SMALL.lookback),
                                                                  np.float32(3e38))})
    with pytest.raises((TrainingError, FloatingPointError)), np.errstate(all="ignore"):
        train(SMALL, TrainConfig(max_epochs=1), data.train, data.val, params=bad)


def test_non_finite_targets_name_batch():
    data = small_task()
    vals = data.train.values.copy()
    vals[data.train.target_starts[-1] + SMALL.horizon - 1] = np.nan
    stream = WindowStream(vals, data.train.target_starts, SMALL.lookback, SMALL.horizon)
    with pytest.raises(TrainingError, match="epoch 0, batch"):
        train(SMALL, TrainConfig(max_epochs=1, batch_size=len(stream)), stream, data.val)


def test_empty_streams_rejected():
    data = small_task()
    with pytest.raises(ValueError):
        train(SMALL, TrainConfig(), data.train.subset([]), data.val)
