"""Minimal dense 2-D tensor math with reverse-mode automatic differentiation.

Everything is a row-major 2-D matrix (scalars are 1x1, vectors are rows or
columns). Each op that touches a gradient-bearing input records its parents
and a backward closure on the output tensor; ``backward(loss)`` materialises
the tape (creation order is a topological order) and walks it in reverse.

The op set is deliberately closed: matmul, transpose, add, mul, rsqrt,
row-mean, sum, silu, softmax over rows, embedding gather, column slice and
concat, rotary position twist, and masked cross-entropy. Larger constructs
(RMSNorm, attention, SwiGLU) are compositions in the model layer.

Broadcasting is restricted to a (1, n) row or an (m, 1) column against an
(m, n) matrix, plus Python scalars. Nothing silently reshapes.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    EmptyLossError,
    InputError,
    NumericError,
    ShapeError,
)

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Skip tape recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A 2-D array plus optional gradient and a link into the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got ndim={arr.ndim}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class Tape:
    """Nodes reaching a loss, in creation (hence topological) order."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so aliasing a shared array is safe
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def trace(loss: Tensor) -> Tape:
    """Collect every tensor reachable from loss, sorted by creation order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    nodes = sorted(seen.values(), key=lambda t: t._seq)
    return Tape(nodes)


def backward(loss: Tensor) -> Tape:
    """Reverse-mode sweep from a scalar loss.

    Grads of every tensor on the tape are cleared first, so repeated calls
    over the same graph produce bit-identical results. Returns the tape.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = trace(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return tape


# ---------------------------------------------------------------------------
# broadcast helpers


def _fold(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum g down to `shape` for row/column broadcast operands."""
    if g.shape == shape:
        return g
    if shape == (1, g.shape[1]):
        return g.sum(axis=0, keepdims=True)
    if shape == (g.shape[0], 1):
        return g.sum(axis=1, keepdims=True)
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    raise ShapeError(f"cannot fold grad {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, big[1]) or small == (big[0], 1) or small == (1, 1):
            return
    raise ShapeError(f"shapes {sa} and {sb} do not broadcast (row/col only)")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    def back(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), back)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def back_scalar(g: np.ndarray) -> None:
            _accumulate(a, g)

        return _result(a.data + a.data.dtype.type(c), (a,), back_scalar)

    _check_broadcast(a, b)
    out_data = a.data + b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _fold(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _fold(g, b.shape))

    return _result(out_data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))

        def back_scalar(g: np.ndarray) -> None:
            _accumulate(a, g * c)

        return _result(a.data * c, (a,), back_scalar)

    _check_broadcast(a, b)
    out_data = a.data * b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _fold(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _fold(g * a.data, b.shape))

    return _result(out_data, (a, b), back)


def rsqrt(a: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(a.data)

    def back(g: np.ndarray) -> None:
        _accumulate(a, g * (-0.5) * y * y * y)

    return _result(y, (a,), back)


def mean_rows(a: Tensor) -> Tensor:
    """Mean along each row: (m, n) -> (m, 1)."""
    n = a.shape[1]
    out_data = a.data.mean(axis=1, keepdims=True)

    def back(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.shape).copy())

    return _result(out_data, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    out_data = a.data.sum().reshape(1, 1)

    def back(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(out_data, (a,), back)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g: np.ndarray) -> None:
        _accumulate(a, g * (sig * (1.0 + x * (1.0 - sig))))

    return _result(x * sig, (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax with max subtraction. -inf entries map to exact zeros."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> None:
        gy = g * y
        _accumulate(a, gy - y * gy.sum(axis=1, keepdims=True))

    return _result(y, (a,), back)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of weight at integer ids; scatter-add on backward."""
    idx = np.asarray(ids)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    bad = np.flatnonzero((idx < 0) | (idx >= weight.shape[0]))
    if bad.size:
        j = int(bad[0])
        raise InputError(
            f"token id {int(idx[j])} at position {j} is outside the "
            f"vocabulary of size {weight.shape[0]}"
        )
    out_data = weight.data[idx]

    def back(g: np.ndarray) -> None:
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        _accumulate(weight, gw)

    return _result(out_data, (weight,), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] outside width {a.shape[1]}")

    def back(g: np.ndarray) -> None:
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        _accumulate(a, ga)

    return _result(a.data[:, start:stop].copy(), (a,), back)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    ps = list(parts)
    rows = ps[0].shape[0]
    if any(p.shape[0] != rows for p in ps):
        raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in ps]}")
    widths = [p.shape[1] for p in ps]
    out_data = np.concatenate([p.data for p in ps], axis=1)
    offsets = np.cumsum([0] + widths)

    def back(g: np.ndarray) -> None:
        for p, lo, hi in zip(ps, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi])

    return _result(out_data, tuple(ps), back)


def _rope_angles(positions: np.ndarray, half: int, theta: float, dtype) -> tuple:
    inv = theta ** (-(np.arange(half, dtype=np.float64) * 2.0) / (2.0 * half))
    ang = positions.astype(np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(a: Tensor, positions, theta: float) -> Tensor:
    """Rotate feature pairs (2i, 2i+1) by pos * theta**(-2i/d).

    Kept as a primitive: the backward is the transposed (negative-angle)
    rotation, which is exactly as auditable as a six-op composition.
    """
    t, d = a.shape
    if d % 2 != 0:
        raise ConfigError(f"rope needs an even head dimension, got {d}")
    pos = np.asarray(positions)
    if pos.shape != (t,):
        raise ShapeError(f"rope positions shape {pos.shape} != ({t},)")
    cos, sin = _rope_angles(pos, d // 2, float(theta), a.data.dtype)
    ev, od = a.data[:, 0::2], a.data[:, 1::2]
    out_data = np.empty_like(a.data)
    out_data[:, 0::2] = ev * cos - od * sin
    out_data[:, 1::2] = ev * sin + od * cos

    def back(g: np.ndarray) -> None:
        ge, go = g[:, 0::2], g[:, 1::2]
        ga = np.empty_like(a.data)
        ga[:, 0::2] = ge * cos + go * sin
        ga[:, 1::2] = -ge * sin + go * cos
        _accumulate(a, ga)

    return _result(out_data, (a,), back)


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over loss_mask-true rows.

    Rows with loss_mask False contribute zero loss and a bitwise-zero
    gradient. An all-False mask is an error, never a silent zero.
    """
    tgt = np.asarray(targets)
    mask = np.asarray(loss_mask, dtype=bool)
    t, v = logits.shape
    if tgt.shape != (t,) or mask.shape != (t,):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {tgt.shape}, "
            f"mask {mask.shape} must share the row count"
        )
    if not mask.any():
        raise EmptyLossError("cross_entropy: loss mask is all False")
    bad = np.flatnonzero(mask & ((tgt < 0) | (tgt >= v)))
    if bad.size:
        j = int(bad[0])
        raise InputError(f"target id {int(tgt[j])} at position {j} outside [0, {v})")

    rows = np.flatnonzero(mask)
    x = logits.data[rows]
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - x[np.arange(rows.size), tgt[rows]]
    n = rows.size
    out_data = np.array([[nll.sum() / n]], dtype=logits.data.dtype)

    def back(g: np.ndarray) -> None:
        gl = np.zeros_like(logits.data)
        p = np.exp(x - lse)
        p[np.arange(rows.size), tgt[rows]] -= 1.0
        gl[rows] = p * (g[0, 0] / n)
        _accumulate(logits, gl)

    return _result(out_data, (logits,), back)


def constant(data, dtype=None) -> Tensor:
    """A non-trainable tensor (e.g. an additive attention mask)."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def parameter(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=True)


def causal_mask(t: int, dtype) -> Tensor:
    """(t, t) additive mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -math.inf
    return Tensor(m)
