"""Dense float64 tensors with a recording tape for reverse-mode gradients,
loss primitives and Adam.

Usage::

    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), labels)
    (gw,) = tape.gradient(loss, [w])

Operations record onto the innermost active tape of the current thread when
at least one input is a watched leaf or an already-recorded result. The tape
is an ordered list, so creation order is a valid topological order and the
reverse pass simply walks it backwards.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError

__all__ = [
    "Tensor", "Tape", "set_checked",
    "matmul", "add", "sub", "mul", "scale", "neg", "relu", "sigmoid", "softplus",
    "log", "exp", "row_sum", "row_mean", "sum_all", "mean_all", "gather_rows",
    "scatter_add_rows", "softmax_rows", "log_softmax_rows", "concat_rows",
    "cross_entropy", "soft_cross_entropy", "AdamState", "adam_step",
]

_local = threading.local()
_CHECKED = False


def set_checked(flag: bool) -> None:
    """Reject NaN/Inf values at tensor creation when ``flag`` is true."""
    global _CHECKED
    _CHECKED = bool(flag)


class Tensor:
    __slots__ = ("value", "requires_grad", "_tape")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(self.value)):
            raise ValueError("non-finite tensor value")
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one reverse pass."""

    def __init__(self):
        self.entries: List[tuple] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._tape is self

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        """d(target)/d(source) for every source; zeros when unreachable.

        ``target`` must be a scalar. Sources may be leaves or recorded
        intermediates.
        """
        if target.value.size != 1:
            raise DimensionError("gradient target must be a scalar")
        grads = {id(target): np.ones_like(target.value)}
        for out, inputs, backward in reversed(self.entries):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not self._tracks(inp):
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(value, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        out._tape = tape
        tape.entries.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# primitives

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.value, b.value

    def backward(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _emit(a.value * s, (a,), lambda g: (g * s,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.value, 0.0)
    return _emit(out, (a,), lambda g: (np.where(out > 0, g, 0.0),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _as_tensor(a)
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return _emit(val, (a,), lambda g: (g * s,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.value
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.value)
    return _emit(e, (a,), lambda g: (g * e,))


def row_sum(a) -> Tensor:
    """Sum across columns: ``[n, d] -> [n]``."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"row_sum: expected 2-d input, got {a.shape}")
    d = a.shape[1]
    return _emit(a.value.sum(axis=1), (a,),
                 lambda g: (np.repeat(g[:, None], d, axis=1),))


def row_mean(a) -> Tensor:
    """Mean across columns: ``[n, d] -> [n]``."""
    a = _as_tensor(a)
    if a.value.ndim != 2 or a.shape[1] == 0:
        raise DimensionError(f"row_mean: expected nonempty 2-d input, got {a.shape}")
    d = a.shape[1]
    return _emit(a.value.mean(axis=1), (a,),
                 lambda g: (np.repeat(g[:, None] / d, d, axis=1),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.value.size
    if n == 0:
        raise DimensionError("mean_all: empty input")
    return _emit(np.asarray(a.value.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")

    def backward(g):
        return (_scatter(g, index, n),)

    return _emit(a.value[index], (a,), backward)


def _scatter(x: np.ndarray, index: np.ndarray, n_out: int) -> np.ndarray:
    m = len(index)
    if m == 0:
        return np.zeros((n_out,) + x.shape[1:])
    mat = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_out, m))
    return np.asarray(mat @ x.reshape(m, -1)).reshape((n_out,) + x.shape[1:])


def scatter_add_rows(a, index, n_out: int) -> Tensor:
    """``out[index[i]] += a[i]``, producing ``n_out`` rows."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != a.shape[0]:
        raise DimensionError(
            f"scatter_add_rows: {len(index)} indices for {a.shape[0]} rows"
        )
    if index.size and (index.min() < 0 or index.max() >= n_out):
        raise DimensionError(f"scatter_add_rows: index out of range for {n_out} rows")
    return _emit(_scatter(a.value, index, n_out), (a,), lambda g: (g[index],))


def _log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-d input, got {a.shape}")
    s = np.exp(_log_softmax(a.value))

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected 2-d input, got {a.shape}")
    ls = _log_softmax(a.value)
    s = np.exp(ls)
    return _emit(ls, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def concat_rows(tensors: Sequence) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat_rows: nothing to concatenate")
    tail = tensors[0].shape[1:]
    if any(t.shape[1:] != tail for t in tensors):
        raise DimensionError("concat_rows: trailing shapes differ")
    cuts = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _emit(np.concatenate([t.value for t in tensors], axis=0), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=0)))


# --------------------------------------------------------------------------
# losses

def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.value.ndim != 2 or len(labels) != logits.shape[0]:
        raise DimensionError(f"cross_entropy: {len(labels)} labels for logits {logits.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label outside [0, {c})")
    onehot = np.zeros_like(logits.value)
    onehot[np.arange(len(labels)), labels] = 1.0
    return soft_cross_entropy(logits, onehot)


def soft_cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of ``-sum_c targets[c] * log softmax(logits)[c]``."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError(f"soft_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    if n == 0:
        raise DimensionError("cross_entropy: empty batch")
    ls = _log_softmax(logits.value)
    loss = -(targets * ls).sum() / n

    def backward(g):
        return (g * (np.exp(ls) * targets.sum(axis=1, keepdims=True) - targets) / n,)

    return _emit(np.asarray(loss), (logits,), backward)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns new parameter arrays; moments
    and the step counter are updated on ``state``."""
    if len(params) != len(grads):
        raise DimensionError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"adam_step: shape mismatch at parameter {i}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
    return out
