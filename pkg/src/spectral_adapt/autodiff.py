"""A small tape-based reverse-mode autodiff over dense float64 arrays.

Operations record themselves onto the innermost active :class:`Tape`
(thread-local) whenever at least one input requires a gradient. Outside a
tape, operations just compute values, which is how gradient-free forward
passes are run.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable


class Tape:
    """Ordered record of differentiable operations; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.records.append(_Record(out, inputs, vjp))


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = current_tape()
    if requires and tape is not None:
        tape.record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf on ``tape``.

    Leaves that appear on the tape but do not influence ``loss`` receive a
    zero gradient. Existing ``.grad`` values are overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, tg in zip(rec.inputs, rec.vjp(g)):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp)


def sparse_const_matmul(matrix, x) -> Tensor:
    """``matrix @ x`` for a constant scipy sparse ``matrix``."""
    x = as_tensor(x)
    if x.data.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_const_matmul: incompatible shapes {matrix.shape} and {x.shape}")
    mt = matrix.T.tocsr()

    def vjp(g):
        return (np.asarray(mt @ g),)

    return _make(np.asarray(matrix @ x.data), (x,), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    shifted = x.data + eps
    return _make(np.log(shifted), (x,), lambda g: (g / shifted,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if t.data.ndim != ndim or other != first:
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), vjp)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit norm; rows with norm below ``eps`` are divided by ``eps``."""
    x = as_tensor(x)
    norm = np.linalg.norm(x.data, axis=1, keepdims=True)
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = x.data / denom

    def vjp(g):
        proj = np.where(small, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _make(y, (x,), vjp)


def batch_standardize_columns(x, eps: float = 1e-5) -> Tensor:
    """Columns shifted to mean 0 and scaled to unit population variance.

    Columns whose variance is at most ``eps`` are mapped to zeros.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=0, keepdims=True)
    centred = x.data - mu
    var = (centred**2).mean(axis=0, keepdims=True)
    live = var > eps
    std = np.where(live, np.sqrt(np.where(live, var, 1.0)), 1.0)
    y = np.where(live, centred / std, 0.0)

    def vjp(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * y).mean(axis=0, keepdims=True)
        return (np.where(live, (g - gm - y * gy) / std, 0.0),)

    return _make(y, (x,), vjp)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params[name].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "spectral-adapt-checkpoint"
CHECKPOINT_VERSION = 1


def arrays_to_json(arrays: dict) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": [float(x) for x in np.asarray(arr).reshape(-1)]}
        for name, arr in sorted(arrays.items())
    }


def arrays_from_json(doc: dict) -> dict:
    return {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc.items()
    }


def save_checkpoint(path, groups: dict, meta: dict | None = None) -> None:
    """Write named groups of arrays (e.g. ``student``, ``teacher``) as JSON.

    Python's float repr round-trips exactly, so values survive bit-for-bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "groups": {g: arrays_to_json(arrs) for g, arrs in sorted(groups.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    groups = {g: arrays_from_json(arrs) for g, arrs in doc["groups"].items()}
    return groups, doc["meta"]
