"""Benchmark CSV loading, chronological splits, z-scoring and window extraction.

CSV files follow the common long-horizon benchmark layout: a ``date`` column
followed by one numeric column per variable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# Split conventions of the standard benchmarks.
ETT_RATIOS = (0.6, 0.2, 0.2)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesDataset:
    variable_names: list[str]
    timestamps: list[str]
    values: np.ndarray  # (N_obs, C)
    frequency: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-D (rows, variables), got {self.values.shape}")
        if self.values.shape[0] != len(self.timestamps):
            raise DataError("row count does not match timestamp count")
        if self.values.shape[1] != len(self.variable_names):
            raise DataError("column count does not match variable names")

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def load_csv(path, frequency: str = "") -> SeriesDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        if header[0].strip() != "date":
            raise DataError(f"{path}: first column must be 'date', got {header[0]!r}")
        names = [h.strip() for h in header[1:]]
        if not names:
            raise DataError(f"{path}: no variable columns")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in zip(names, row[1:]):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("nan", "na", "null"):
                    raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {col!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col!r}")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesDataset(names, stamps, np.asarray(rows, dtype=np.float64), frequency)


def write_csv(ds: SeriesDataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["date", *ds.variable_names])
        for ts, row in zip(ds.timestamps, ds.values):
            w.writerow([ts, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# splitting and scaling


def parse_ratios(text: str) -> tuple[float, ...]:
    """``"6:2:2"`` -> ``(0.6, 0.2, 0.2)``."""
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        raise DataError(f"bad split ratio {text!r}") from None
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise DataError(f"split needs three positive parts, got {text!r}")
    s = sum(parts)
    return tuple(p / s for p in parts)


def chronological_split(n_obs: int, ratios: Sequence[float],
                        min_rows: int = 0) -> tuple[range, range, range]:
    """Contiguous train/val/test row ranges.

    The first two boundaries are floored; the test split takes the rest.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    a = math.floor(ratios[0] * n_obs + 1e-9)
    b = a + math.floor(ratios[1] * n_obs + 1e-9)
    parts = (range(0, a), range(a, b), range(b, n_obs))
    for name, r in zip(("train", "val", "test"), parts):
        if len(r) < max(min_rows, 1):
            raise DataError(
                f"insufficient rows: {name} split has {len(r)} rows, needs at least {max(min_rows, 1)} "
                f"(dataset has {n_obs})")
    return parts


@dataclass(frozen=True)
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray

    def write(self, path, names: Sequence[str]) -> None:
        with open(path, "w") as f:
            for n, m, s in zip(names, self.mean, self.std):
                f.write(f"{n} {float(m)!r} {float(s)!r}\n")

    @classmethod
    def read(cls, path) -> "StandardizeStats":
        means, stds = [], []
        for line in Path(path).read_text().splitlines():
            if line.strip() and not line.startswith("#"):
                _, m, s = line.rsplit(maxsplit=2)
                means.append(float(m))
                stds.append(float(s))
        return cls(np.array(means), np.array(stds))


def standardize(ds: SeriesDataset, train_range: range) -> tuple[SeriesDataset, StandardizeStats]:
    """Z-score every column with the mean and population std of ``train_range``."""
    if len(train_range) < 2:
        raise DataError("training range must contain at least two rows")
    train = ds.values[train_range.start:train_range.stop]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    bad = [ds.variable_names[i] for i in np.flatnonzero(~(std > 0))]
    if bad:
        raise DataError(f"zero-variance column(s) in training split: {bad}")
    values = (ds.values - mean) / std
    return replace(ds, values=values), StandardizeStats(mean, std)


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowBatch:
    inputs: np.ndarray   # (B, C, T)
    targets: np.ndarray  # (B, C, L)
    starts: np.ndarray   # row index of each window's first target row


class WindowStream:
    """Sliding (lookback, horizon) windows over ``values`` by target start row.

    Windows are materialized per batch; the stream itself stores only the
    target start indices.
    """

    def __init__(self, values: np.ndarray, target_starts: np.ndarray, lookback: int, horizon: int):
        self.values = values
        self.target_starts = np.asarray(target_starts, dtype=np.int64)
        self.lookback = lookback
        self.horizon = horizon
        self._in_off = np.arange(-lookback, 0)
        self._out_off = np.arange(horizon)

    def __len__(self) -> int:
        return len(self.target_starts)

    def take(self, idx) -> WindowBatch:
        s = self.target_starts[np.asarray(idx, dtype=np.int64)]
        x = self.values[s[:, None] + self._in_off]   # (B, T, C)
        y = self.values[s[:, None] + self._out_off]  # (B, L, C)
        return WindowBatch(np.ascontiguousarray(x.transpose(0, 2, 1)),
                           np.ascontiguousarray(y.transpose(0, 2, 1)), s)

    def batches(self, batch_size: int, order=None) -> Iterator[WindowBatch]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for i in range(0, len(order), batch_size):
            yield self.take(order[i:i + batch_size])

    def subset(self, idx) -> "WindowStream":
        return WindowStream(self.values, self.target_starts[np.asarray(idx, dtype=np.int64)],
                            self.lookback, self.horizon)


def make_windows(values: np.ndarray, rows: range, lookback: int, horizon: int,
                 context_from_previous: bool = False, stride: int = 1) -> WindowStream:
    """Windows whose targets lie inside ``rows``.

    Without borrowed context the lookback must also lie inside ``rows``.  With
    ``context_from_previous`` the lookback may reach back into the rows before
    ``rows.start``, so the first target row is ``rows.start`` itself.
    """
    if lookback < 1 or horizon < 1 or stride < 1:
        raise DataError("lookback, horizon and stride must be >= 1")
    values = np.asarray(values)
    if context_from_previous:
        if rows.start < lookback:
            raise DataError(
                f"insufficient rows: {rows.start} rows precede the range, lookback needs {lookback}")
        first = rows.start
        need = horizon
    else:
        first = rows.start + lookback
        need = lookback + horizon
    if len(rows) < need:
        raise DataError(
            f"insufficient rows: range has {len(rows)} rows, windows need {need} "
            f"(lookback {lookback}, horizon {horizon})")
    starts = np.arange(first, rows.stop - horizon + 1, stride)
    return WindowStream(values, starts, lookback, horizon)


@dataclass
class PreparedData:
    dataset: SeriesDataset
    stats: StandardizeStats
    ranges: tuple[range, range, range]
    train: WindowStream
    val: WindowStream
    test: WindowStream


def prepare(ds: SeriesDataset, ratios, lookback: int, horizon: int,
            context: bool = True) -> PreparedData:
    """Split, standardize with train statistics, and cut windows for each split."""
    ranges = chronological_split(ds.n_obs, ratios, min_rows=lookback + horizon)
    std_ds, stats = standardize(ds, ranges[0])
    v = std_ds.values
    return PreparedData(
        dataset=std_ds, stats=stats, ranges=ranges,
        train=make_windows(v, ranges[0], lookback, horizon, False),
        val=make_windows(v, ranges[1], lookback, horizon, context),
        test=make_windows(v, ranges[2], lookback, horizon, context),
    )


# ---------------------------------------------------------------------------
# synthetic


def generate_synthetic(periods: Sequence[float], amplitudes: Sequence[float], slope: float,
                       noise: float, n_obs: int, n_vars: int, seed: int = 0,
                       start: str = "2016-07-01 00:00:00", step_minutes: int = 60) -> SeriesDataset:
    """Sum of sinusoids plus a linear trend plus Gaussian noise.

    Channel ``c`` is ``sum_j a_j sin(2 pi t / p_j + phi_c) + slope t + noise``,
    with one random phase ``phi_c`` per channel.
    """
    if len(periods) != len(amplitudes):
        raise DataError("periods and amplitudes must have equal length")
    if any(p <= 0 for p in periods):
        raise DataError("periods must be positive")
    if n_obs < 1 or n_vars < 1 or noise < 0:
        raise DataError("n_obs and n_vars must be >= 1 and noise >= 0")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=n_vars)
    t = np.arange(n_obs, dtype=np.float64)[:, None]
    values = slope * t + np.zeros((1, n_vars))
    for p, a in zip(periods, amplitudes):
        values = values + a * np.sin(2 * np.pi * t / p + phase[None, :])
    if noise > 0:
        values = values + rng.normal(0.0, noise, size=values.shape)
    t0 = datetime.fromisoformat(start)
    dt = timedelta(minutes=step_minutes)
    stamps = [(t0 + i * dt).strftime("%Y-%m-%d %H:%M:%S") for i in range(n_obs)]
    names = [f"var{c}" for c in range(n_vars)]
    return SeriesDataset(names, stamps, values, frequency=f"{step_minutes}min")
