"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs requires a gradient.  Outside a tape (or when no input requires a
gradient) results are plain constants, which is how inference paths run.

    >>> x = Value(np.array(3.0), requires_grad=True)
    >>> with Tape():
    ...     y = x * x
    >>> float(backward(y)[x])
    6.0
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class _Local(threading.local):
    def __init__(self):
        self.stack = []


_local = _Local()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op = op
        self.shapes = (a, b)


class Value:
    __slots__ = ("data", "grad", "node", "requires_grad", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node = next(_ids)
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar; scalars (python / numpy 0-d) go through scale/shift
    def __add__(self, other):
        if _is_scalar(other):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, np.ndarray) and x.ndim == 0
    )


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


@dataclass
class _Record:
    inputs: tuple
    output: Value
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes shadow the outer one for the
    duration of the ``with`` block.
    """

    records: list = field(default_factory=list)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Value) -> dict:
        return backward(loss)


def _tape_stack() -> list:
    return _local.stack


def active_tape() -> Tape | None:
    stack = _local.stack
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _record(data: np.ndarray, inputs: tuple, rule) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.node = next(_ids)
    out.tape = None
    stack = _local.stack
    tape = stack[-1] if stack else None
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append(_Record(inputs, out, rule))
    else:
        out.requires_grad = False
    return out


def _same_shape(op, a: Value, b: Value):
    if a.data.shape != b.data.shape:
        raise ShapeError(op, a.data.shape, b.data.shape)


# ----------------------------------------------------------------------------
# primitives

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Value:
    a = as_value(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Value:
    a = as_value(a)
    return _record(a.data + c, (a,), lambda g: (g,))


def matmul(a, b) -> Value:
    """2-D @ 2-D matrix product."""
    a, b = as_value(a), as_value(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None) -> Value:
    """x @ w.T (+ b): a dense layer with weight of shape (out, in)."""
    x, w = as_value(x), as_value(w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError("linear", xd.shape, wd.shape)
    out = xd @ wd.T
    if b is None:
        return _record(out, (x, w), lambda g: (g @ wd, g.T @ xd))
    b = as_value(b)
    if b.data.shape != (wd.shape[0],):
        raise ShapeError("linear", wd.shape, b.data.shape)
    return _record(out + b.data, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def transpose(a) -> Value:
    a = as_value(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def add_bias(x, b) -> Value:
    """Add a 1-D bias to every row of a 2-D array."""
    x, b = as_value(x), as_value(b)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError("add_bias", x.data.shape, b.data.shape)
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def silu(x) -> Value:
    x = as_value(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data
    return _record(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sqrt(x) -> Value:
    x = as_value(x)
    r = np.sqrt(x.data)
    return _record(r, (x,), lambda g: (g * 0.5 / r,))


def square(x) -> Value:
    x = as_value(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def total(x) -> Value:
    """Sum of all elements, as a 0-d Value."""
    x = as_value(x)
    shape = x.data.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Value:
    x = as_value(x)
    shape, n = x.data.shape, x.data.size
    return _record(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def concat(parts: Sequence, axis: int = -1) -> Value:
    parts = [as_value(p) for p in parts]
    datas = [p.data for p in parts]
    ax = axis % datas[0].ndim
    for p in datas[1:]:
        if p.ndim != datas[0].ndim or any(
            p.shape[i] != datas[0].shape[i] for i in range(p.ndim) if i != ax
        ):
            raise ShapeError("concat", datas[0].shape, p.shape)
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def rule(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _record(np.concatenate(datas, axis=ax), tuple(parts), rule)


def reshape(x, shape) -> Value:
    x = as_value(x)
    old = x.data.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def detach(v: Value) -> Value:
    """Same data, no ancestry: gradients stop here."""
    out = Value.__new__(Value)
    out.data = v.data
    out.grad = None
    out.node = next(_ids)
    out.requires_grad = False
    out.tape = None
    return out


# ----------------------------------------------------------------------------

def backward(loss: Value, wrt: Sequence[Value] = ()) -> dict:
    """Set ``leaf.grad`` to d(loss)/d(leaf) for every reachable leaf.

    Returns a mapping from leaf Value to its gradient.  Intermediate Values
    listed in ``wrt`` are added to the mapping (zeros when unreached).
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or loss.tape is None:
        return {v: np.zeros_like(v.data) for v in wrt}
    watch = {v.node: v for v in wrt}
    seen = {}
    grads = {loss.node: np.ones_like(loss.data)}
    leaves = {}
    records = loss.tape.records
    # records after the loss cannot contribute
    stop = len(records)
    for i in range(len(records) - 1, -1, -1):
        if records[i].output is loss:
            stop = i + 1
            break
    for rec in reversed(records[:stop]):
        g = grads.pop(rec.output.node, None)
        if g is None:
            continue
        if rec.output.node in watch:
            seen[rec.output.node] = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad:
                continue
            if inp.tape is None:
                leaves[inp.node] = inp
            prev = grads.get(inp.node)
            grads[inp.node] = gi if prev is None else prev + gi
    out = {}
    for node, leaf in leaves.items():
        leaf.grad = grads[node]
        out[leaf] = leaf.grad
    for node, v in watch.items():
        if v not in out:
            out[v] = seen.get(node, np.zeros_like(v.data))
    return out


# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Value], grads: Sequence, state: AdamState) -> list:
    """One bias-corrected Adam update.

    Missing gradients (``None``) count as zero.  Parameter arrays are replaced,
    never modified in place, so previously detached views stay valid.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return list(params)
