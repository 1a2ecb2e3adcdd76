"""Huber loss, Adam, and the early-stopping training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import Tape, Var, backward, value_of
from .model import ModelConfig, ParameterSet, forward, init_parameters, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


# ---------------------------------------------------------------------------
# loss


def _check_delta(delta):
    if not delta > 0:
        raise ValueError(f"Huber threshold must be positive, got {delta}")


def huber_loss(pred, target, delta: float = 1.0):
    """Mean Huber loss: ``0.5 r^2`` for ``|r| < delta``, ``delta (|r| - delta/2)`` otherwise.

    ``pred`` may be a taped :class:`Var`; the result is then taped as well.
    """
    _check_delta(delta)
    pv, tv = value_of(pred), np.asarray(target)
    if pv.shape != tv.shape:
        raise ValueError(f"pred shape {pv.shape} != target shape {tv.shape}")
    r = tv - pv
    a = np.abs(r)
    quad = a < delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    loss = per.mean()
    if not isinstance(pred, Var):
        return loss
    g = _huber_grad(r, quad, delta)
    return pred.tape.record("huber", (pred,), np.asarray(loss), lambda s: (s * g,))


def _huber_grad(r, quad, delta):
    return np.where(quad, -r, -delta * np.sign(r)) / r.size


def huber_grad(pred, target, delta: float = 1.0) -> np.ndarray:
    """Gradient of :func:`huber_loss` with respect to ``pred``."""
    _check_delta(delta)
    r = np.asarray(target) - np.asarray(pred)
    return _huber_grad(r, np.abs(r) < delta, delta)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("params, grads and optimizer state must share names")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_p[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def records(self) -> list[dict]:
        return [{"epoch": i, "train_loss": tl, "val_loss": vl, "seconds": s}
                for i, (tl, vl, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds))]

    def losses(self) -> tuple:
        """Everything except wall-clock times; equal across seeded reruns."""
        return tuple(self.train_loss), tuple(self.val_loss), self.best_epoch


def train_step(params: ParameterSet, config: ModelConfig, x: np.ndarray, y: np.ndarray,
               state: AdamState, tcfg: TrainConfig) -> tuple[ParameterSet, AdamState, float]:
    tape = Tape()
    fc = forward(params, config, x, mode="train", tape=tape)
    if fc.output is None:
        raise TrainingError("no trainable branch is enabled")
    loss = huber_loss(fc.output, y, tcfg.huber_delta)
    loss_value = float(loss.value)
    if not np.isfinite(loss_value):
        return params, state, loss_value
    grads = backward(tape, loss)
    trainable = params.trainable()
    new_arrays, state = adam_step(trainable, grads, state, tcfg)
    new_arrays.update(fc.running_stats)
    return params.replace_arrays(new_arrays), state, loss_value


def evaluate_loss(params: ParameterSet, config: ModelConfig, stream, delta: float,
                  batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for batch in stream.batches(batch_size):
        pred = forward(params, config, batch.inputs.astype(params.dtype), mode="infer").y_hat
        n = pred.size
        total += float(huber_loss(pred, batch.targets, delta)) * n
        count += n
    if count == 0:
        raise ValueError("empty evaluation stream")
    return total / count


def train(config: ModelConfig, tcfg: TrainConfig, train_stream, val_stream, *,
          params: ParameterSet | None = None, dtype=np.float32,
          metrics_path=None, checkpoint_path=None,
          max_batches_per_epoch: int | None = None) -> tuple[ParameterSet, TrainHistory]:
    """Mini-batch Adam on the Huber loss with validation early stopping.

    Returns the parameters of the epoch with the lowest validation loss.  The
    shuffle order for every epoch is drawn from ``tcfg.seed``, so two calls
    with equal arguments produce equal histories and parameters.
    """
    if len(train_stream) == 0 or len(val_stream) == 0:
        raise ValueError("train and validation streams must be non-empty")
    if params is None:
        params = init_parameters(config, seed=tcfg.seed, dtype=dtype)
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState.zeros_like(params.trainable())
    history = TrainHistory()
    best_val, best_params, stale = np.inf, params.copy(), 0
    metrics = open(metrics_path, "w") if metrics_path is not None else None

    try:
        for epoch in range(tcfg.max_epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_stream))
            losses = []
            for b, batch in enumerate(train_stream.batches(tcfg.batch_size, order=order)):
                if max_batches_per_epoch is not None and b >= max_batches_per_epoch:
                    break
                x = batch.inputs.astype(dtype, copy=False)
                y = batch.targets.astype(dtype, copy=False)
                params, state, loss = train_step(params, config, x, y, state, tcfg)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss} at epoch {epoch}, batch {b} "
                        f"(window start rows {batch.starts[:5].tolist()}...)")
                losses.append(loss)
            val = evaluate_loss(params, config, val_stream, tcfg.huber_delta)
            dt = time.perf_counter() - t0
            history.train_loss.append(float(np.mean(losses)))
            history.val_loss.append(val)
            history.seconds.append(dt)
            logger.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, history.train_loss[-1], val, dt)
            if metrics is not None:
                metrics.write(json.dumps(history.records()[-1]) + "\n")
                metrics.flush()
            if val < best_val:
                best_val, best_params, stale = val, params.copy(), 0
                history.best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, best_params, config,
                                    extra={"epoch": epoch, "seed": tcfg.seed})
            else:
                stale += 1
                if stale >= tcfg.patience:
                    logger.info("early stop after epoch %d (best %d)", epoch, history.best_epoch)
                    break
    finally:
        if metrics is not None:
            metrics.close()
    return best_params, history

