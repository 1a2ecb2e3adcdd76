"""Multi-scale dilated convolution forecaster.

The input window is shifted so each channel's last observed value is zero.
Two groups of parallel depthwise conv blocks (a long-kernel group and a
short-kernel group, each with growing dilations) read the shifted window,
their outputs are mixed with per-channel weights, and a shared linear head
maps the mixture from lookback to horizon.  A second shared linear map from
the shifted window (the autoregressive branch) is added, and the anchor is
added back at the end.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from safetensors.numpy import load_file, save_file

from .kernels import (
    ConvBlockParams,
    Tape,
    Var,
    add,
    affine_map,
    batchnorm1d,
    dilated_depthwise_conv1d,
    relu,
    value_of,
)

PADDING_MODES = ("symmetric", "causal")


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 96
    horizon: int = 96
    n_vars: int = 7
    n_long: int = 4
    n_short: int = 4
    k_long: int = 13
    k_short: int = 3
    huber_delta: float = 1.0
    use_long: bool = True
    use_short: bool = True
    use_ar: bool = True
    padding_mode: str = "symmetric"
    ar_on_normalized: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("lookback", "horizon", "n_vars", "k_long", "k_short"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.n_long < 0 or self.n_short < 0:
            raise ValueError("block counts must be non-negative")
        if self.n_long + self.n_short < 1 and (self.use_long or self.use_short):
            raise ValueError("n_long + n_short must be >= 1 unless both conv modules are disabled")
        if self.n_long > 0 and self.n_short > 0 and self.k_long <= self.k_short:
            raise ValueError(f"k_long ({self.k_long}) must exceed k_short ({self.k_short})")
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}, got {self.padding_mode!r}")

    @property
    def n_blocks(self) -> int:
        return self.n_long + self.n_short

    def kernel_sizes(self) -> list[int]:
        return [self.k_long] * self.n_long + [self.k_short] * self.n_short

    def dilations(self) -> list[int]:
        return build_dilation_schedule(self.n_long) + build_dilation_schedule(self.n_short)

    def active_blocks(self) -> list[int]:
        """Indices of blocks that take part in fusion under the ablation flags."""
        idx = []
        if self.use_long:
            idx += list(range(self.n_long))
        if self.use_short:
            idx += list(range(self.n_long, self.n_blocks))
        return idx

    @property
    def conv_active(self) -> bool:
        return bool(self.active_blocks())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def build_dilation_schedule(count: int) -> list[int]:
    """Dilations ``2**(i-1) + 1`` for blocks ``i = 1..count``."""
    return [2 ** i + 1 for i in range(count)]


def receptive_field(k: int, d: int) -> int:
    if k < 1 or d < 1:
        raise ValueError("k and d must be >= 1")
    return (k - 1) * d + 1


def padding_for(k: int, d: int, mode: str = "symmetric") -> tuple[int, int]:
    total = (k - 1) * d
    if mode == "symmetric":
        return math.ceil(total / 2), total // 2
    if mode == "causal":
        return total, 0
    raise ValueError(f"unknown padding mode {mode!r}")


@dataclass
class ParameterSet:
    blocks: list[ConvBlockParams]
    fusion_W: np.ndarray
    ffn_W1: np.ndarray
    ffn_b1: np.ndarray
    ar_W2: np.ndarray
    ar_b2: np.ndarray

    _BLOCK_TRAINABLE = ("kernel", "bias", "bn_gamma", "bn_beta")
    _BLOCK_BUFFERS = ("bn_running_mean", "bn_running_var")

    def trainable(self) -> dict[str, np.ndarray]:
        """Learnable arrays keyed by stable names."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for attr in self._BLOCK_TRAINABLE:
                out[f"blocks.{i}.{attr}"] = getattr(blk, attr)
        out["fusion_W"] = self.fusion_W
        out["ffn_W1"] = self.ffn_W1
        out["ffn_b1"] = self.ffn_b1
        out["ar_W2"] = self.ar_W2
        out["ar_b2"] = self.ar_b2
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for attr in self._BLOCK_BUFFERS:
                out[f"blocks.{i}.{attr}"] = getattr(blk, attr)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.trainable(), **self.buffers()}

    def replace_arrays(self, updates: dict[str, np.ndarray]) -> "ParameterSet":
        """Copy with the named arrays swapped out; unnamed arrays are shared."""
        blocks = []
        for i, blk in enumerate(self.blocks):
            kw = {}
            for attr in self._BLOCK_TRAINABLE + self._BLOCK_BUFFERS:
                key = f"blocks.{i}.{attr}"
                kw[attr] = updates.get(key, getattr(blk, attr))
            blocks.append(ConvBlockParams(dilation=blk.dilation, **kw))
        top = {k: updates.get(k, getattr(self, k))
               for k in ("fusion_W", "ffn_W1", "ffn_b1", "ar_W2", "ar_b2")}
        return ParameterSet(blocks=blocks, **top)

    def copy(self) -> "ParameterSet":
        return self.replace_arrays({k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "ParameterSet":
        return self.replace_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    @property
    def dtype(self):
        return self.ar_W2.dtype


def init_parameters(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> ParameterSet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, identity batchnorm,
    fusion weights ``1/(n+m)``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    C, T, L = config.n_vars, config.lookback, config.horizon
    blocks = []
    for k, d in zip(config.kernel_sizes(), config.dilations()):
        bound = 1.0 / math.sqrt(k)
        blocks.append(ConvBlockParams(
            kernel=rng.uniform(-bound, bound, size=(C, k)).astype(dtype),
            bias=np.zeros(C, dtype),
            bn_gamma=np.ones(C, dtype),
            bn_beta=np.zeros(C, dtype),
            bn_running_mean=np.zeros(C, dtype),
            bn_running_var=np.ones(C, dtype),
            dilation=d,
        ))
    nb = max(config.n_blocks, 1)
    bound = 1.0 / math.sqrt(T)
    return ParameterSet(
        blocks=blocks,
        fusion_W=np.full((C, config.n_blocks), 1.0 / nb, dtype),
        ffn_W1=rng.uniform(-bound, bound, size=(L, T)).astype(dtype),
        ffn_b1=np.zeros(L, dtype),
        ar_W2=rng.uniform(-bound, bound, size=(L, T)).astype(dtype),
        ar_b2=np.zeros(L, dtype),
    )


def zero_parameters(config: ModelConfig, dtype=np.float64) -> ParameterSet:
    """All learnable arrays zero; running statistics at their initial values."""
    p = init_parameters(config, seed=0, dtype=dtype)
    return p.replace_arrays({k: np.zeros_like(v) for k, v in p.trainable().items()})


@dataclass
class Forecast:
    """Forecast for a batch; arrays are ``(batch, channel, horizon)``.

    ``output`` is the taped ``y_hat`` when the forward pass was recorded, and
    ``running_stats`` holds the updated batchnorm statistics in train mode.
    """

    y_hat: np.ndarray
    y_c: np.ndarray
    y_h: np.ndarray
    anchor: np.ndarray
    output: Var | None = None
    running_stats: dict[str, np.ndarray] | None = None


def conv_block_forward(x, block: ConvBlockParams, training: bool, padding_mode="symmetric",
                       momentum=0.1, eps=1e-5, kernel=None, bias=None, gamma=None, beta=None):
    """Dilated conv -> batchnorm -> ReLU.  Returns ``(h, new_mean, new_var)``.

    The optional ``kernel``/``bias``/``gamma``/``beta`` arguments override the
    block's arrays, which lets a caller pass taped variables.
    """
    pl, pr = padding_for(block.kernel_size, block.dilation, padding_mode)
    u = dilated_depthwise_conv1d(
        x,
        block.kernel if kernel is None else kernel,
        block.bias if bias is None else bias,
        block.dilation, pl, pr,
    )
    z, rm, rv = batchnorm1d(
        u,
        block.bn_gamma if gamma is None else gamma,
        block.bn_beta if beta is None else beta,
        block.bn_running_mean, block.bn_running_var,
        training=training, momentum=momentum, eps=eps,
    )
    return relu(z), rm, rv


def fuse(h_list, fusion_W, columns=None):
    """Per-channel weighted sum of block outputs.

    ``M[b, c, t] = sum_i h_i[b, c, t] * fusion_W[c, columns[i]]``.  ``columns``
    maps each entry of ``h_list`` to a column of ``fusion_W`` and defaults to
    ``0..len(h_list)-1``.
    """
    if not h_list:
        raise ValueError("fuse needs at least one block output")
    hv = [value_of(h) for h in h_list]
    Wv = value_of(fusion_W)
    shape = hv[0].shape
    if any(h.shape != shape for h in hv):
        raise ValueError("all block outputs must share one shape")
    if columns is None:
        columns = list(range(len(hv)))
    if Wv.ndim != 2 or Wv.shape[0] != shape[1] or max(columns) >= Wv.shape[1]:
        raise ValueError(f"fusion_W shape {Wv.shape} does not match {len(hv)} blocks of {shape}")

    M = hv[0] * Wv[None, :, columns[0], None]
    for h, col in zip(hv[1:], columns[1:]):
        M = M + h * Wv[None, :, col, None]

    tapes = [a.tape for a in (*h_list, fusion_W) if isinstance(a, Var)]
    if not tapes:
        return M

    def vjp(g):
        gW = np.zeros_like(Wv)
        grads = []
        for h, col in zip(hv, columns):
            gW[:, col] += np.einsum("bct,bct->c", g, h)
            grads.append(g * Wv[None, :, col, None])
        return (*grads, gW)

    return tapes[0].record("fuse", (*h_list, fusion_W), M, vjp)


def forward(params: ParameterSet, config: ModelConfig, x: np.ndarray, mode: str = "infer",
            tape: Tape | None = None) -> Forecast:
    """Forecast ``(B, C, L)`` from a lookback batch ``x`` of shape ``(B, C, T)``.

    With ``tape`` given, every learnable array is registered on it under its
    :meth:`ParameterSet.trainable` name and ``Forecast.output`` is the taped
    prediction.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != (config.n_vars, config.lookback):
        raise ValueError(
            f"expected input of shape (B, {config.n_vars}, {config.lookback}), got {x.shape}")
    if len(params.blocks) != config.n_blocks:
        raise ValueError("parameter set does not match config block count")
    training = mode == "train"

    P = params.trainable()
    if tape is not None:
        P = {k: tape.param(k, v) for k, v in P.items()}

    anchor = x[:, :, -1:]
    x_norm = x - anchor
    B, C, L = x.shape[0], config.n_vars, config.horizon
    stats = {} if training else None

    active = config.active_blocks()
    if active:
        hs = []
        for i in active:
            h, rm, rv = conv_block_forward(
                x_norm, params.blocks[i], training, config.padding_mode,
                config.bn_momentum, config.bn_eps,
                kernel=P[f"blocks.{i}.kernel"], bias=P[f"blocks.{i}.bias"],
                gamma=P[f"blocks.{i}.bn_gamma"], beta=P[f"blocks.{i}.bn_beta"],
            )
            if training:
                stats[f"blocks.{i}.bn_running_mean"] = rm
                stats[f"blocks.{i}.bn_running_var"] = rv
            hs.append(h)
        M = fuse(hs, P["fusion_W"], columns=active)
        y_c = affine_map(P["ffn_W1"], P["ffn_b1"], M)
    else:
        y_c = np.zeros((B, C, L), dtype=x.dtype)

    if config.use_ar:
        ar_in = x_norm if config.ar_on_normalized else x
        y_h = affine_map(P["ar_W2"], P["ar_b2"], ar_in)
    else:
        y_h = np.zeros((B, C, L), dtype=x.dtype)

    y_hat = add(add(y_c, y_h), anchor)
    if not np.all(np.isfinite(value_of(y_hat))):
        raise FloatingPointError("non-finite values in forecast")
    return Forecast(
        y_hat=value_of(y_hat),
        y_c=value_of(y_c),
        y_h=value_of(y_h),
        anchor=anchor[:, :, 0],
        output=y_hat if isinstance(y_hat, Var) else None,
        running_stats=stats,
    )


def predict(params: ParameterSet, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    return forward(params, config, x, mode="infer").y_hat


def block_outputs(params: ParameterSet, config: ModelConfig, x: np.ndarray) -> list[np.ndarray]:
    """Inference-mode output of every block (ablation flags ignored)."""
    x = np.asarray(x)
    x_norm = x - x[:, :, -1:]
    return [conv_block_forward(x_norm, blk, False, config.padding_mode,
                               config.bn_momentum, config.bn_eps)[0]
            for blk in params.blocks]


# ---------------------------------------------------------------------------
# checkpoints


_META_KEY = "msdcn"


def save_checkpoint(path, params: ParameterSet, config: ModelConfig, extra: dict | None = None) -> None:
    # safetensors writes multi-key metadata in hash order; a single key keeps
    # the file bytes deterministic.
    meta = {"config": config.to_dict(),
            "dilations": [b.dilation for b in params.blocks],
            "extra": {k: str(v) for k, v in (extra or {}).items()}}
    tensors = {k: np.ascontiguousarray(v) for k, v in params.arrays().items()}
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(meta, sort_keys=True)})


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig, dict]:
    """Returns ``(params, config, extra)`` where ``extra`` holds the string
    metadata passed to :func:`save_checkpoint`."""
    from safetensors import SafetensorError, safe_open

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="numpy") as f:
            meta = json.loads((f.metadata() or {})[_META_KEY])
        tensors = load_file(str(path))
        config = ModelConfig.from_dict(meta["config"])
        dilations = meta["dilations"]
    except (KeyError, ValueError, OSError, SafetensorError) as exc:
        raise ValueError(f"bad checkpoint {path}: {exc}") from exc
    blocks = []
    for i, d in enumerate(dilations):
        blocks.append(ConvBlockParams(
            **{a: tensors[f"blocks.{i}.{a}"] for a in
               ParameterSet._BLOCK_TRAINABLE + ParameterSet._BLOCK_BUFFERS},
            dilation=d,
        ))
    params = ParameterSet(blocks=blocks, **{k: tensors[k] for k in
                                            ("fusion_W", "ffn_W1", "ffn_b1", "ar_W2", "ar_b2")})
    return params, config, meta["extra"]


def with_flags(config: ModelConfig, **flags) -> ModelConfig:
    return replace(config, **flags)
