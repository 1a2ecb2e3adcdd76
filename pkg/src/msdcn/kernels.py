"""Array primitives with reverse-mode gradients.

Each op accepts plain ``np.ndarray`` arguments or :class:`Var` handles that
live on a :class:`Tape`.  With no ``Var`` among the arguments the op is a pure
function of its inputs and records nothing, which is what inference uses.
When any argument is a ``Var`` the op appends a :class:`TapeNode` holding a
vector-Jacobian closure, and :func:`backward` later replays the tape in
reverse creation order.

Grids are ``(batch, channel, time)`` arrays.  Ops preserve the dtype of their
inputs, so the same code runs in float64 for gradient checks and float32 for
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ConvBlockParams",
    "Tape",
    "TapeError",
    "TapeNode",
    "Var",
    "add",
    "affine_map",
    "backward",
    "batchnorm1d",
    "dilated_depthwise_conv1d",
    "relu",
    "value_of",
]


class TapeError(RuntimeError):
    pass


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"


class Tape:
    """Linear record of taped ops; nodes are appended in topological order."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[TapeNode] = []
        self.params: dict[str, int] = {}
        self.consumed = False

    def _push(self, value: np.ndarray) -> Var:
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a leaf whose gradient :func:`backward` reports under ``name``."""
        if name in self.params:
            return Var(self, self.params[name])
        var = self._push(np.asarray(value))
        self.params[name] = var.index
        return var

    def record(self, op: str, inputs: Sequence[object], value: np.ndarray, vjp) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        idx = tuple(a.index if isinstance(a, Var) else None for a in inputs)
        out = self._push(value)
        self.nodes.append(TapeNode(op, idx, out.index, vjp))
        return out


def value_of(a):
    return a.value if isinstance(a, Var) else a


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise TapeError("arguments recorded on different tapes")
            tape = a.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Var, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Propagate ``seed`` from ``loss`` back to every registered parameter.

    Returns ``{name: gradient}`` for all parameters on the tape.  Parameters the
    loss does not depend on get zero gradients.  Contributions from multiple
    uses of one value are summed.  A tape can be replayed only once.
    """
    if tape.consumed:
        raise TapeError("backward() already called on this tape")
    if loss.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True

    grads: list[np.ndarray | None] = [None] * len(tape.values)
    lv = tape.values[loss.index]
    grads[loss.index] = np.full_like(lv, seed)
    for node in reversed(tape.nodes):
        g = grads[node.output]
        if g is None:
            continue
        for i, gi in zip(node.inputs, node.vjp(g)):
            if i is None or gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
        grads[node.output] = None

    out = {}
    for name, i in tape.params.items():
        g = grads[i]
        out[name] = np.zeros_like(tape.values[i]) if g is None else g
    return out


def _check_grid(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 3:
        raise ValueError(f"{name} must be a (batch, channel, time) grid, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvBlockParams:
    """Learnable and running state of one conv -> batchnorm -> ReLU block."""

    kernel: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    dilation: int
    kernel_size: int = field(init=False)

    def __post_init__(self):
        if self.kernel.ndim != 2:
            raise ValueError(f"kernel must be (channels, k), got {self.kernel.shape}")
        self.kernel_size = self.kernel.shape[1]
        if self.dilation < 1 or self.kernel_size < 1:
            raise ValueError("dilation and kernel_size must be >= 1")
        if np.any(self.bn_running_var < 0):
            raise ValueError("bn_running_var must be non-negative")

    @property
    def n_channels(self) -> int:
        return self.kernel.shape[0]


def dilated_depthwise_conv1d(x, kernel, bias, dilation: int, pad_left: int, pad_right: int):
    """Depthwise dilated 1-D convolution with zero padding.

    ``out[b, c, t] = bias[c] + sum_j kernel[c, j] * xpad[b, c, t + j*dilation]``
    where ``xpad`` is ``x`` with ``pad_left`` zeros in front and ``pad_right``
    behind.  The pads must sum to ``(k - 1) * dilation`` so the time length is
    preserved.  Channel ``c`` of the output reads only channel ``c`` of ``x``.
    """
    xv, kv, bv = value_of(x), value_of(kernel), value_of(bias)
    _check_grid(xv)
    if pad_left < 0 or pad_right < 0:
        raise ValueError(f"padding must be non-negative, got ({pad_left}, {pad_right})")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    B, C, T = xv.shape
    if kv.ndim != 2 or kv.shape[0] != C:
        raise ValueError(f"kernel must have shape ({C}, k), got {kv.shape}")
    if bv.shape != (C,):
        raise ValueError(f"bias must have shape ({C},), got {bv.shape}")
    k = kv.shape[1]
    if pad_left + pad_right != (k - 1) * dilation:
        raise ValueError(
            f"pad_left + pad_right must equal (k-1)*dilation = {(k - 1) * dilation}, "
            f"got {pad_left} + {pad_right}"
        )

    xp = np.pad(xv, ((0, 0), (0, 0), (pad_left, pad_right)))
    out = np.empty_like(xv, shape=(B, C, T))
    out[...] = bv[None, :, None]
    for j in range(k):
        s = j * dilation
        out += kv[None, :, j, None] * xp[:, :, s:s + T]

    tape = _tape_of(x, kernel, bias)
    if tape is None:
        return out

    def vjp(g):
        gk = np.empty_like(kv)
        gx = np.zeros_like(xp) if isinstance(x, Var) else None
        for j in range(k):
            s = j * dilation
            gk[:, j] = np.einsum("bct,bct->c", g, xp[:, :, s:s + T])
            if gx is not None:
                gx[:, :, s:s + T] += kv[None, :, j, None] * g
        if gx is not None:
            gx = gx[:, :, pad_left:pad_left + T]
        return gx, gk, g.sum(axis=(0, 2))

    return tape.record("conv1d", (x, kernel, bias), out, vjp)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm1d(x, gamma, beta, running_mean, running_var, training: bool,
                momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalization over the (batch, time) axes.

    Returns ``(out, new_running_mean, new_running_var)``.  In training mode
    the batch mean and biased variance normalize the input, and the running
    statistics move toward the batch statistics by ``momentum`` (the variance
    uses the unbiased estimate).  In inference mode the running statistics are
    used and returned unchanged.
    """
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    _check_grid(xv)
    if not np.all(np.isfinite(xv)):
        raise ValueError("batchnorm1d received non-finite input")
    if eps < 0 or (training and eps == 0):
        raise ValueError(f"eps must be positive, got {eps}")
    B, C, T = xv.shape
    rm = np.asarray(running_mean)
    rv = np.asarray(running_var)

    if training:
        n = B * T
        if n < 2:
            raise ValueError("training-mode batchnorm needs batch*time >= 2")
        mu = xv.mean(axis=(0, 2))
        var = xv.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu[None, :, None]) * inv[None, :, None]
        new_rm = (1 - momentum) * rm + momentum * mu
        new_rv = (1 - momentum) * rv + momentum * var * (n / (n - 1))
    else:
        n = None
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (xv - rm[None, :, None]) * inv[None, :, None]
        new_rm, new_rv = rm, rv
    out = gv[None, :, None] * xhat + bv[None, :, None]

    tape = _tape_of(x, gamma, beta)
    if tape is None:
        return out, new_rm, new_rv

    def vjp(g):
        g_gamma = np.einsum("bct,bct->c", g, xhat)
        g_beta = g.sum(axis=(0, 2))
        gx = None
        if isinstance(x, Var):
            gxhat = g * gv[None, :, None]
            if training:
                s1 = gxhat.sum(axis=(0, 2))[None, :, None]
                s2 = np.einsum("bct,bct->c", gxhat, xhat)[None, :, None]
                gx = inv[None, :, None] * (gxhat - s1 / n - xhat * s2 / n)
            else:
                gx = gxhat * inv[None, :, None]
        return gx, g_gamma, g_beta

    out_var = tape.record("batchnorm1d", (x, gamma, beta), out, vjp)
    return out_var, new_rm, new_rv


# ---------------------------------------------------------------------------
# elementwise and affine


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = xv > 0
    return tape.record("relu", (x,), out, lambda g: (g * mask,))


def add(a, b):
    """Broadcasting sum; either side may be a constant array."""
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record("add", (a, b), out,
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def affine_map(W, b, v):
    """``W @ v + b`` applied along the last axis of ``v``.

    ``W`` is ``(L, T)``, ``b`` is ``(L,)`` and ``v`` is ``(..., T)``; the
    result is ``(..., L)``.  Every leading index uses the same ``W`` and
    ``b``.
    """
    Wv, bv, vv = value_of(W), value_of(b), value_of(v)
    if Wv.ndim != 2:
        raise ValueError(f"W must be 2-D, got shape {Wv.shape}")
    L, T = Wv.shape
    if bv.shape != (L,):
        raise ValueError(f"b must have shape ({L},), got {bv.shape}")
    if vv.shape[-1:] != (T,):
        raise ValueError(f"v must end in a length-{T} axis, got shape {vv.shape}")
    out = vv @ Wv.T + bv

    tape = _tape_of(W, b, v)
    if tape is None:
        return out

    def vjp(g):
        g2 = g.reshape(-1, L)
        gW = g2.T @ vv.reshape(-1, T)
        gb = g2.sum(axis=0)
        gv = g @ Wv if isinstance(v, Var) else None
        return gW, gb, gv

    return tape.record("affine", (W, b, v), out, vjp)
