"""Forecast metrics, test-set evaluation and the ablation runner."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .model import ModelConfig, ParameterSet, forward
from .training import TrainConfig, train


def _pair(pred, truth):
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one element")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


@dataclass
class ForecastReport:
    dataset: str
    horizon: int
    mse: float
    mae: float
    n_windows: int
    flags: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def flag_dict(config: ModelConfig) -> dict:
    return {"long": config.use_long, "short": config.use_short, "ar": config.use_ar}


def evaluate(params: ParameterSet, config: ModelConfig, stream, *, dataset: str = "",
             seed: int = 0, batch_size: int = 256) -> ForecastReport:
    """Inference-mode MSE/MAE over every element of every window in ``stream``.

    Per-batch sums are accumulated in float64 in stream order, so the result
    does not depend on anything but the inputs.
    """
    if len(stream) == 0:
        raise ValueError("empty test stream")
    t0 = time.perf_counter()
    sq = ab = 0.0
    count = 0
    for batch in stream.batches(batch_size):
        pred = forward(params, config, batch.inputs.astype(params.dtype), mode="infer").y_hat
        r = pred.astype(np.float64) - batch.targets
        sq += float(np.sum(r * r))
        ab += float(np.sum(np.abs(r)))
        count += r.size
    return ForecastReport(
        dataset=dataset, horizon=config.horizon, mse=sq / count, mae=ab / count,
        n_windows=len(stream), flags=flag_dict(config), seed=seed,
        config_hash=config.config_hash(), seconds=time.perf_counter() - t0,
    )


CONV_GRID = [
    {"use_long": False, "use_short": False, "use_ar": True},
    {"use_long": True, "use_short": False, "use_ar": True},
    {"use_long": False, "use_short": True, "use_ar": True},
    {"use_long": True, "use_short": True, "use_ar": True},
]

AR_GRID = [
    {"use_long": False, "use_short": False, "use_ar": True},
    {"use_long": True, "use_short": True, "use_ar": False},
    {"use_long": True, "use_short": True, "use_ar": True},
]

GRIDS = {"conv": CONV_GRID, "ar": AR_GRID}


def run_ablation_grid(config: ModelConfig, tcfg: TrainConfig, data, grid, *,
                      dataset: str = "", dtype=np.float32, **train_kwargs):
    """Train and test one model per flag combination with shared seed and data.

    ``data`` needs ``train``, ``val`` and ``test`` window streams.  Returns a
    list of ``(ForecastReport, ParameterSet)`` pairs in grid order.
    """
    if isinstance(grid, str):
        grid = GRIDS[grid]
    if not grid:
        raise ValueError("ablation grid is empty")
    results = []
    for flags in grid:
        if not (flags.get("use_long") or flags.get("use_short") or flags.get("use_ar")):
            raise ValueError(f"grid entry {flags} disables every branch")
        cfg = replace(config, **flags)
        params, _ = train(cfg, tcfg, data.train, data.val, dtype=dtype, **train_kwargs)
        results.append((evaluate(params, cfg, data.test, dataset=dataset, seed=tcfg.seed), params))
    return results


def format_table(reports) -> str:
    lines = [f"{'long':>5} {'short':>5} {'ar':>3} {'MSE':>9} {'MAE':>9} {'windows':>8}"]
    mark = {True: "✓", False: "×"}
    for r in reports:
        f = r.flags
        lines.append(f"{mark[f['long']]:>5} {mark[f['short']]:>5} {mark[f['ar']]:>3} "
                     f"{r.mse:9.4f} {r.mae:9.4f} {r.n_windows:8d}")
    return "\n".join(lines)
