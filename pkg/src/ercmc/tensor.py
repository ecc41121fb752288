"""Dense 2-D tensors with reverse-mode automatic differentiation.

Values are row-major 2-D float arrays: vectors are 1xN rows and scalars are
1x1. Every differentiable operation executed while recording is enabled
appends an entry to a module-level tape (execution order is already a
topological order); ``backward`` replays the tape once in reverse,
accumulating gradients by summation, and clears it. One forward/backward
sequence runs at a time per process; tensors whose parameters are frozen may
be read concurrently.

Precision is per-tensor (float32 or float64). Gradient checks and training
default to float64 so central finite differences have headroom.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateRowError,
    DimensionError,
)

_TAPE: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []
_GRAD_ENABLED = True

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A 2-D array with an optional gradient buffer.

    Constructing a tensor with ``requires_grad=True`` makes it a leaf: its
    gradient buffer is allocated eagerly (zeros) so untouched parameters
    report zero gradients rather than ``None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def accumulate_grad(self, g: np.ndarray) -> None:
        self._ensure_grad()
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _out(data: np.ndarray, requires: bool) -> Tensor:
    """Internal fast constructor for op results (lazy gradient buffer)."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires
    t.grad = None
    t.name = None
    return t


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    if out.requires_grad:
        _TAPE.append((out, backward_fn))


def _tracking(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; forward results are plain values."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    # a single row may broadcast against a matrix with the same width
    if sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1):
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = _out(a.data + b.data, _tracking(a, b))

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    _record(out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = _out(a.data - b.data, _tracking(a, b))

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_reduce_to(g, b.shape))

    _record(out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (same shapes, or one single-row operand)."""
    _broadcast_check(a, b, "mul")
    out = _out(a.data * b.data, _tracking(a, b))

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    _record(out, bw)
    return out


def scale(t: Tensor, c: float) -> Tensor:
    out = _out(t.data * c, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * c)

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = _out(a.data @ b.data, _tracking(a, b))

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, bw)
    return out


def transpose(t: Tensor) -> Tensor:
    out = _out(t.data.T.copy(), _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g.T)

    _record(out, bw)
    return out


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading extents must agree."""
    if not parts:
        raise DimensionError("concat_lastdim: no parts")
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != rows:
            raise DimensionError(
                f"concat_lastdim: leading extents differ, {parts[0].shape} vs {p.shape}"
            )
    widths = [p.shape[1] for p in parts]
    out = _out(np.concatenate([p.data for p in parts], axis=1), _tracking(*parts))

    def bw(g: np.ndarray) -> None:
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate_grad(g[:, ofs:ofs + w])
            ofs += w

    _record(out, bw)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the first axis; widths must agree."""
    if not parts:
        raise DimensionError("concat_rows: no parts")
    width = parts[0].shape[1]
    for p in parts[1:]:
        if p.shape[1] != width:
            raise DimensionError(
                f"concat_rows: widths differ, {parts[0].shape} vs {p.shape}"
            )
    heights = [p.shape[0] for p in parts]
    out = _out(np.concatenate([p.data for p in parts], axis=0), _tracking(*parts))

    def bw(g: np.ndarray) -> None:
        ofs = 0
        for p, h in zip(parts, heights):
            if p.requires_grad:
                p.accumulate_grad(g[ofs:ofs + h, :])
            ofs += h

    _record(out, bw)
    return out


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    n = t.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {t.shape}")
    out = _out(t.data[start:stop].copy(), _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            buf = t._ensure_grad()
            buf[start:stop] += g

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearities

def relu(t: Tensor) -> Tensor:
    out = _out(np.maximum(t.data, 0.0), _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * (t.data > 0.0))

    _record(out, bw)
    return out


def tanh(t: Tensor) -> Tensor:
    val = np.tanh(t.data)
    out = _out(val, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * (1.0 - val * val))

    _record(out, bw)
    return out


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    # split by sign to keep exp() arguments non-positive
    val = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _out(val, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * val * (1.0 - val))

    _record(out, bw)
    return out


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(t: Tensor, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}") from None
    return fn(t)


# ---------------------------------------------------------------------------
# softmax family

def softmax_lastdim(t: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; masked-out entries (mask False) are exactly zero."""
    x = t.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != {x.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateRowError("softmax row is fully masked")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=1, keepdims=True)
        z = np.where(mask, np.exp(x - m), 0.0)
    else:
        m = x.max(axis=1, keepdims=True)
        z = np.exp(x - m)
    val = z / z.sum(axis=1, keepdims=True)
    out = _out(val, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            inner = (g * val).sum(axis=1, keepdims=True)
            t.accumulate_grad(val * (g - inner))

    _record(out, bw)
    return out


def log_softmax_lastdim(t: Tensor) -> Tensor:
    x = t.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = shifted - logsum
    out = _out(val, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g - np.exp(val) * g.sum(axis=1, keepdims=True))

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# regularization and loss

def dropout(t: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout driven entirely by the supplied generator."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = rng.random(t.shape) >= rate
    factor = keep / (1.0 - rate)
    out = _out(t.data * factor, _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(g * factor)

    _record(out, bw)
    return out


def nll_loss(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the target class per row."""
    n, classes = log_probs.shape
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != (n,):
        raise ContractError(f"nll_loss: {len(idx)} targets for {n} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise IndexError(f"nll_loss: target out of range for {classes} classes")
    picked = log_probs.data[np.arange(n), idx]
    out = _out(np.array([[-picked.mean()]], dtype=log_probs.dtype), _tracking(log_probs))

    def bw(g: np.ndarray) -> None:
        if log_probs.requires_grad:
            buf = log_probs._ensure_grad()
            np.add.at(buf, (np.arange(n), idx), -g[0, 0] / n)

    _record(out, bw)
    return out


def sum_all(t: Tensor) -> Tensor:
    out = _out(np.array([[t.data.sum()]], dtype=t.dtype), _tracking(t))

    def bw(g: np.ndarray) -> None:
        if t.requires_grad:
            t.accumulate_grad(np.full_like(t.data, g[0, 0]))

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# relative-position lookups
#
# ``index`` is an integer matrix mapping each (query row, key column) pair to
# a row of ``table``. Both ops are differentiable in their float arguments;
# gradients for rows selected several times accumulate.

def relpos_score(q: Tensor, table: Tensor, index: np.ndarray) -> Tensor:
    """scores[j, k] = q[j] . table[index[j, k]]"""
    idx = np.asarray(index, dtype=np.intp)
    if q.shape[1] != table.shape[1]:
        raise DimensionError(f"relpos_score: widths differ, {q.shape} vs {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("relpos_score: index outside table")
    gathered = table.data[idx]  # (J, K, D)
    out = _out(np.einsum("jd,jkd->jk", q.data, gathered), _tracking(q, table))

    def bw(g: np.ndarray) -> None:
        if q.requires_grad:
            q.accumulate_grad(np.einsum("jk,jkd->jd", g, gathered))
        if table.requires_grad:
            buf = table._ensure_grad()
            contrib = g[:, :, None] * q.data[:, None, :]
            np.add.at(buf, idx.reshape(-1), contrib.reshape(-1, table.shape[1]))

    _record(out, bw)
    return out


def relpos_combine(weights: Tensor, table: Tensor, index: np.ndarray) -> Tensor:
    """out[j] = sum_k weights[j, k] * table[index[j, k]]"""
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != weights.shape:
        raise DimensionError(
            f"relpos_combine: index shape {idx.shape} != weights {weights.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("relpos_combine: index outside table")
    gathered = table.data[idx]  # (J, K, D)
    out = _out(np.einsum("jk,jkd->jd", weights.data, gathered), _tracking(weights, table))

    def bw(g: np.ndarray) -> None:
        if weights.requires_grad:
            weights.accumulate_grad(np.einsum("jd,jkd->jk", g, gathered))
        if table.requires_grad:
            buf = table._ensure_grad()
            contrib = weights.data[:, :, None] * g[:, None, :]
            np.add.at(buf, idx.reshape(-1), contrib.reshape(-1, table.shape[1]))

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss and clear the tape.

    Gradients sum into every reachable tensor with ``requires_grad``. The
    tape is consumed: each recorded forward supports exactly one backward.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, fn in reversed(_TAPE):
        if out.grad is not None:
            fn(out.grad)
    _TAPE.clear()


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# initialization and optimization

def glorot_uniform(rows: int, cols: int, rng: np.random.Generator,
                   dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Defaults: betas (0.9, 0.999), eps 1e-8, weight decay 0.01. Gradients are
    zeroed after each applied step. An optional global-norm clip rescales all
    gradients before the update.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p!r} has no gradient")
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params))
            if total > self.clip_norm and total > 0.0:
                factor = self.clip_norm / total
                for p in self.params:
                    p.grad *= factor
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
            p.grad[...] = 0.0
