"""Analytic parameter/MAC counts, latency timing and per-block activation dumps.

MAC convention: one multiply-accumulate per kernel tap, per fusion weight
application and per affine-map weight.  Batchnorm, ReLU, bias adds and the
last-value shift count zero.
"""

from __future__ import annotations

import csv
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, ParameterSet, block_outputs

# Trainable entries per channel in one block: kernel taps + conv bias + BN gamma/beta.
_BLOCK_EXTRA = 1 + 2


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Trainable parameter count of every array group in a ParameterSet."""
    C, T, L = config.n_vars, config.lookback, config.horizon
    return {
        "conv_blocks": sum(C * (k + _BLOCK_EXTRA) for k in config.kernel_sizes()),
        "fusion": C * config.n_blocks,
        "ffn": T * L + L,
        "ar": T * L + L,
    }


def count_params(config: ModelConfig) -> int:
    """Total trainable parameters held by the model's ParameterSet."""
    return sum(param_breakdown(config).values())


def count_active_params(config: ModelConfig) -> int:
    """Trainable parameters reachable from the output under the ablation flags."""
    C, T, L = config.n_vars, config.lookback, config.horizon
    ks = config.kernel_sizes()
    active = config.active_blocks()
    n = sum(C * (ks[i] + _BLOCK_EXTRA) for i in active)
    if active:
        n += C * len(active) + T * L + L
    if config.use_ar:
        n += T * L + L
    return n


def count_buffers(config: ModelConfig) -> int:
    """Batchnorm running statistics (not trainable)."""
    return 2 * config.n_vars * config.n_blocks


def mac_breakdown(config: ModelConfig) -> dict[str, int]:
    """MACs for one forecast window, split by stage, under the ablation flags."""
    C, T, L = config.n_vars, config.lookback, config.horizon
    ks = config.kernel_sizes()
    active = config.active_blocks()
    return {
        "conv": sum(C * T * ks[i] for i in active),
        "fusion": C * T * len(active),
        "ffn": C * T * L if active else 0,
        "ar": C * T * L if config.use_ar else 0,
    }


def count_macs(config: ModelConfig) -> int:
    return sum(mac_breakdown(config).values())


def activation_bytes(config: ModelConfig, batch_size: int = 1, itemsize: int = 4) -> int:
    """Rough peak of live forward activations for one batch.

    Counts the input and its shifted copy, three (B, C, T) arrays per active
    block (conv, norm, ReLU), the fused map, and three (B, C, L) outputs.
    """
    C, T, L = config.n_vars, config.lookback, config.horizon
    nb = len(config.active_blocks())
    elems = (2 + 3 * nb + (1 if nb else 0)) * C * T + 3 * C * L
    return elems * batch_size * itemsize


def environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "system": platform.system(),
    }


@dataclass
class EfficiencyReport:
    total_params: int
    active_params: int
    buffers: int
    macs_per_window: int
    latency_mean: float = 0.0
    latency_median: float = 0.0
    latency_p95: float = 0.0
    timings: list[float] = field(default_factory=list)
    activation_bytes: int = 0
    batch_size: int = 0
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        rows = [
            ("Total params", f"{self.total_params:,}"),
            ("Active params", f"{self.active_params:,}"),
            ("BN buffers", f"{self.buffers:,}"),
            ("MACs / window", f"{self.macs_per_window:,}"),
            ("Activation memory", f"{self.activation_bytes / 2**20:.2f} MiB (batch {self.batch_size})"),
        ]
        if self.timings:
            rows += [
                ("Passes timed", str(len(self.timings))),
                ("Latency mean", f"{self.latency_mean * 1e3:.3f} ms"),
                ("Latency median", f"{self.latency_median * 1e3:.3f} ms"),
                ("Latency p95", f"{self.latency_p95 * 1e3:.3f} ms"),
            ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def time_inference(params: ParameterSet, config: ModelConfig, batches, repetitions: int = 5,
                   warmup: int = 1) -> dict:
    """Wall-clock time of full inference passes over ``batches``.

    ``batches`` is a list of input arrays ``(B, C, T)``; one pass runs the model
    on all of them.  Warm-up passes are run first and discarded.
    """
    from .model import predict

    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if isinstance(batches, np.ndarray):
        batches = [batches]
    batches = [np.asarray(b, dtype=params.dtype) for b in batches]
    for _ in range(warmup):
        for b in batches:
            predict(params, config, b)
    timings = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for b in batches:
            predict(params, config, b)
        timings.append(time.perf_counter() - t0)
    t = np.asarray(timings)
    return {
        "timings": timings,
        "latency_mean": float(t.mean()),
        "latency_median": float(np.median(t)),
        "latency_p95": float(np.percentile(t, 95)),
        "environment": environment(),
    }


def profile(config: ModelConfig, params: ParameterSet | None = None, batches=None,
            repetitions: int = 5) -> EfficiencyReport:
    report = EfficiencyReport(
        total_params=count_params(config),
        active_params=count_active_params(config),
        buffers=count_buffers(config),
        macs_per_window=count_macs(config),
    )
    if params is not None and batches is not None:
        if isinstance(batches, np.ndarray):
            batches = [batches]
        timing = time_inference(params, config, batches, repetitions)
        for k, v in timing.items():
            setattr(report, k, v)
        report.batch_size = max(len(b) for b in batches)
        report.activation_bytes = activation_bytes(config, report.batch_size,
                                                   np.dtype(params.dtype).itemsize)
    return report


@dataclass
class BlockDump:
    columns: dict[str, np.ndarray]
    suppressed: list[int]
    channel: int


def dump_block_activations(params: ParameterSet, config: ModelConfig, window: np.ndarray,
                           channel: int) -> BlockDump:
    """Inference output of every block for one channel of one window.

    Blocks whose output is zero everywhere on that channel are reported in
    ``suppressed`` (1-based block ids, matching the column names).
    """
    window = np.asarray(window)
    if window.ndim == 2:
        window = window[None]
    if window.shape[0] != 1:
        raise ValueError("dump takes a single window")
    if not 0 <= channel < config.n_vars:
        raise ValueError(f"channel {channel} out of range [0, {config.n_vars})")
    hs = block_outputs(params, config, window.astype(params.dtype))
    cols = {"t": np.arange(config.lookback)}
    suppressed = []
    for i, h in enumerate(hs, start=1):
        series = h[0, channel]
        cols[f"block{i}"] = series
        if not np.any(series):
            suppressed.append(i)
    return BlockDump(cols, suppressed, channel)


def write_block_dump(dump: BlockDump, path, header: dict | None = None) -> None:
    with open(path, "w", newline="") as f:
        for k, v in (header or {}).items():
            f.write(f"# {k}: {v}\n")
        f.write(f"# channel: {dump.channel}\n")
        f.write(f"# suppressed: {','.join(map(str, dump.suppressed)) or 'none'}\n")
        w = csv.writer(f, lineterminator="\n")
        names = list(dump.columns)
        w.writerow(names)
        for row in zip(*(dump.columns[n] for n in names)):
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
