"""Command-line entry point: ``msdcn {train,ablate,profile,dump,synth}``.

Settings are layered: built-in defaults, then a named preset, then a
``key = value`` config file, then command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataError, generate_synthetic, load_csv, parse_ratios, prepare,
                   write_csv)
from .evaluation import GRIDS, evaluate, format_table, run_ablation_grid
from .model import PADDING_MODES, ModelConfig, init_parameters, load_checkpoint, save_checkpoint
from .profiling import dump_block_activations, profile, write_block_dump
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("msdcn")


@dataclass
class RunConfig:
    # data
    data: str = ""
    split: str = "7:1:2"
    context: bool = True
    # model
    lookback: int = 96
    horizon: int = 96
    n_vars: int = 7
    n_long: int = 4
    n_short: int = 4
    k_long: int = 13
    k_short: int = 3
    padding_mode: str = "symmetric"
    use_long: bool = True
    use_short: bool = True
    use_ar: bool = True
    ar_on_normalized: bool = True
    # training
    huber_delta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"
    # outputs and command options
    out_dir: str = "runs/default"
    grid: str = "conv"
    repetitions: int = 5
    profile_windows: int = 256
    checkpoint: str = ""
    window: int = 0
    channel: int = 0
    dump_split: str = "test"
    periods: str = "24,168"
    amplitudes: str = "1.0,0.5"
    slope: float = 0.001
    noise: float = 0.1
    n_obs: int = 5000
    synth_out: str = "synth.csv"
    preset: str = ""

    def model_config(self, n_vars: int | None = None) -> ModelConfig:
        return ModelConfig(
            lookback=self.lookback, horizon=self.horizon,
            n_vars=self.n_vars if n_vars is None else n_vars,
            n_long=self.n_long, n_short=self.n_short, k_long=self.k_long, k_short=self.k_short,
            huber_delta=self.huber_delta, use_long=self.use_long, use_short=self.use_short,
            use_ar=self.use_ar, padding_mode=self.padding_mode,
            ar_on_normalized=self.ar_on_normalized, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            huber_delta=self.huber_delta, seed=self.seed,
        )

    def config_hash(self) -> str:
        d = asdict(self)
        for k in ("out_dir", "synth_out"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


PRESETS = {
    "ett": {"split": "6:2:2", "lookback": 96},
    "illness": {"split": "7:1:2", "lookback": 36, "horizon": 24},
    "default": {"split": "7:1:2", "lookback": 96},
    "dlinear-shape": {"lookback": 96, "horizon": 720, "n_long": 0, "n_short": 0,
                      "use_long": False, "use_short": False, "use_ar": True},
    "ar-only": {"lookback": 96, "horizon": 720, "n_long": 0, "n_short": 0,
                "use_long": False, "use_short": False, "use_ar": True},
    "traffic": {"lookback": 96, "horizon": 720, "n_vars": 862, "split": "7:1:2"},
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    value = value.strip()
    if kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(flags: dict) -> RunConfig:
    """Layer defaults < preset < config file < flags into a RunConfig."""
    flags = dict(flags)
    config_path = flags.pop("config", None)
    file_vals = read_config_file(config_path) if config_path else {}
    preset = flags.get("preset", file_vals.get("preset", ""))
    if preset and preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = {}
    merged.update(PRESETS.get(preset, {}))
    merged.update(file_vals)
    merged.update(flags)
    return RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})


# ---------------------------------------------------------------------------
# argument parsing


def _model_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key = value settings file")
    p.add_argument("--preset", default=S, choices=sorted(PRESETS))
    p.add_argument("--lookback", type=int, default=S)
    p.add_argument("--horizon", type=int, default=S)
    p.add_argument("--n-long", dest="n_long", type=int, default=S)
    p.add_argument("--n-short", dest="n_short", type=int, default=S)
    p.add_argument("--k-long", dest="k_long", type=int, default=S)
    p.add_argument("--k-short", dest="k_short", type=int, default=S)
    p.add_argument("--padding", dest="padding_mode", choices=PADDING_MODES, default=S)
    p.add_argument("--no-long", dest="use_long", action="store_false", default=S)
    p.add_argument("--no-short", dest="use_short", action="store_false", default=S)
    p.add_argument("--no-ar", dest="use_ar", action="store_false", default=S)
    p.add_argument("--ar-raw", dest="ar_on_normalized", action="store_false", default=S,
                   help="feed the autoregressive branch the unshifted window")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", dest="out_dir", default=S, help="run directory")


def _data_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="CSV file with a leading 'date' column")
    p.add_argument("--split", default=S, help="train:val:test ratio, e.g. 6:2:2")
    p.add_argument("--no-context", dest="context", action="store_false", default=S,
                   help="do not borrow lookback rows from the preceding split")


def _train_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--epochs", dest="max_epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--lr", dest="learning_rate", type=float, default=S)
    p.add_argument("--patience", type=int, default=S)
    p.add_argument("--delta", dest="huber_delta", type=float, default=S)
    p.add_argument("--dtype", choices=("float32", "float64"), default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="msdcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, then evaluate on the test split")
    _model_flags(p), _data_flags(p), _train_flags(p)

    p = sub.add_parser("ablate", help="train one model per ablation setting")
    _model_flags(p), _data_flags(p), _train_flags(p)
    p.add_argument("--grid", default=S, choices=sorted(GRIDS))

    p = sub.add_parser("profile", help="parameter/MAC counts and inference latency")
    _model_flags(p), _data_flags(p)
    p.add_argument("--n-vars", dest="n_vars", type=int, default=S)
    p.add_argument("--repetitions", type=int, default=S)
    p.add_argument("--windows", dest="profile_windows", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)

    p = sub.add_parser("dump", help="per-block activations of one window as CSV")
    _data_flags(p)
    p.add_argument("--config", default=S)
    p.add_argument("--checkpoint", default=S, required=True)
    p.add_argument("--window", type=int, default=S)
    p.add_argument("--channel", type=int, default=S)
    p.add_argument("--from-split", dest="dump_split", choices=("train", "val", "test"), default=S)
    p.add_argument("--out", dest="out_dir", default=S)

    p = sub.add_parser("synth", help="write a synthetic multi-periodic CSV")
    p.add_argument("--config", default=S)
    p.add_argument("--periods", default=S)
    p.add_argument("--amplitudes", default=S)
    p.add_argument("--slope", type=float, default=S)
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--n", dest="n_obs", type=int, default=S)
    p.add_argument("--channels", dest="n_vars", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--lookback", type=int, default=S)
    p.add_argument("--horizon", type=int, default=S)
    p.add_argument("--out", dest="synth_out", default=S)
    return parser


# ---------------------------------------------------------------------------
# commands


def _dtype(rc: RunConfig):
    return np.float64 if rc.dtype == "float64" else np.float32


def _load_prepared(rc: RunConfig):
    if not rc.data:
        raise DataError("no dataset given (use --data)")
    ds = load_csv(rc.data)
    return ds, prepare(ds, parse_ratios(rc.split), rc.lookback, rc.horizon, context=rc.context)


def _validate(rc: RunConfig) -> None:
    rc.model_config()
    rc.train_config()
    parse_ratios(rc.split)
    if rc.data and not Path(rc.data).is_file():
        raise FileNotFoundError(f"dataset not found: {rc.data}")


def _stamp(rc: RunConfig) -> dict:
    return {"config_hash": rc.config_hash(), "seed": rc.seed}


def cmd_train(rc: RunConfig) -> int:
    _validate(rc)
    ds, data = _load_prepared(rc)
    cfg = rc.model_config(n_vars=ds.n_vars)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(rc)
    (out / "run.cfg").write_text(f"# config_hash: {stamp['config_hash']}\n" + rc.to_text())
    with open(out / "stats.txt", "w") as f:
        f.write(f"# config_hash: {stamp['config_hash']} seed: {rc.seed}\n")
        for n, m, s in zip(ds.variable_names, data.stats.mean, data.stats.std):
            f.write(f"{n} {float(m)!r} {float(s)!r}\n")

    params, history = train(cfg, rc.train_config(), data.train, data.val, dtype=_dtype(rc),
                            metrics_path=out / "history.jsonl")
    save_checkpoint(out / "checkpoint.safetensors", params, cfg,
                    extra={**stamp, "best_epoch": history.best_epoch, "split": rc.split})
    report = evaluate(params, cfg, data.test, dataset=Path(rc.data).stem, seed=rc.seed)
    report.config_hash = stamp["config_hash"]
    _write_history(out / "history.jsonl", history, stamp)
    _write_reports(out, [report])
    print(f"{report.dataset} L={report.horizon}: test MSE {report.mse:.4f} MAE {report.mae:.4f} "
          f"({report.n_windows} windows, best epoch {history.best_epoch})")
    return 0


def _write_history(path, history, stamp) -> None:
    with open(path, "w") as f:
        for rec in history.records():
            f.write(json.dumps({**rec, **stamp}) + "\n")


def _write_reports(out: Path, reports) -> None:
    with open(out / "report.jsonl", "w") as f:
        for r in reports:
            f.write(r.to_json() + "\n")
    head = f"# config_hash: {reports[0].config_hash} seed: {reports[0].seed}\n"
    (out / "report.txt").write_text(head + format_table(reports) + "\n")


def cmd_ablate(rc: RunConfig) -> int:
    if rc.grid not in GRIDS:
        raise ValueError(f"unknown grid {rc.grid!r}; choose from {sorted(GRIDS)}")
    _validate(rc)
    ds, data = _load_prepared(rc)
    cfg = rc.model_config(n_vars=ds.n_vars)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation_grid(cfg, rc.train_config(), data, rc.grid,
                                dataset=Path(rc.data).stem, dtype=_dtype(rc))
    reports = []
    for report, _ in results:
        report.config_hash = rc.config_hash()
        reports.append(report)
    _write_reports(out, reports)
    table = format_table(reports)
    (out / "ablation.txt").write_text(f"# config_hash: {rc.config_hash()} seed: {rc.seed}\n{table}\n")
    print(table)
    return 0


def cmd_profile(rc: RunConfig) -> int:
    if rc.repetitions < 3:
        raise ValueError("--repetitions must be >= 3")
    _validate(rc)
    if rc.data:
        ds, data = _load_prepared(rc)
        cfg = rc.model_config(n_vars=ds.n_vars)
        stream = data.test
        idx = np.arange(min(len(stream), rc.profile_windows))
        windows = stream.take(idx).inputs
    else:
        cfg = rc.model_config()
        rng = np.random.default_rng(rc.seed)
        windows = rng.standard_normal((rc.profile_windows, cfg.n_vars, cfg.lookback))
    params = init_parameters(cfg, seed=rc.seed, dtype=_dtype(rc))
    batches = [windows[i:i + rc.batch_size] for i in range(0, len(windows), rc.batch_size)]
    report = profile(cfg, params, batches, repetitions=rc.repetitions)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**report.to_dict(), **_stamp(rc), "windows": len(windows)}
    (out / "profile.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(report.format())
    return 0


def cmd_dump(rc: RunConfig) -> int:
    params, cfg, meta = load_checkpoint(rc.checkpoint)
    rc = replace(rc, lookback=cfg.lookback, horizon=cfg.horizon, split=meta.get("split", rc.split),
                 seed=int(meta.get("seed", rc.seed)))
    _validate(rc)
    ds, data = _load_prepared(rc)
    if ds.n_vars != cfg.n_vars:
        raise DataError(f"checkpoint expects {cfg.n_vars} variables, dataset has {ds.n_vars}")
    stream = getattr(data, rc.dump_split)
    if not 0 <= rc.window < len(stream):
        raise IndexError(f"window {rc.window} out of range: {rc.dump_split} split has {len(stream)} windows")
    window = stream.take([rc.window]).inputs
    dump = dump_block_activations(params, cfg, window, rc.channel)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"blocks_w{rc.window}_c{rc.channel}.csv"
    write_block_dump(dump, path, header={**_stamp(rc), "checkpoint": rc.checkpoint,
                                         "window": rc.window, "split": rc.dump_split})
    print(f"wrote {path} ({len(dump.columns) - 1} blocks, suppressed: {dump.suppressed or 'none'})")
    return 0


def cmd_synth(rc: RunConfig) -> int:
    try:
        periods = [float(p) for p in rc.periods.split(",")]
        amps = [float(a) for a in rc.amplitudes.split(",")]
    except ValueError:
        raise ValueError("--periods and --amplitudes take comma-separated numbers") from None
    if len(amps) == 1 and len(periods) > 1:
        amps = amps * len(periods)
    ds = generate_synthetic(periods, amps, rc.slope, rc.noise, rc.n_obs, rc.n_vars, seed=rc.seed)
    Path(rc.synth_out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, rc.synth_out)
    print(f"wrote {rc.synth_out}: {ds.n_obs} rows x {ds.n_vars} variables")
    return 0


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "profile": cmd_profile,
            "dump": cmd_dump, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        return COMMANDS[command](rc)
    except (FileNotFoundError, DataError, TrainingError, ValueError, IndexError) as exc:
        print(f"msdcn {command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
