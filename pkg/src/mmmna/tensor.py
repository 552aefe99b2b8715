"""Dense tensors with a reverse-mode differentiation tape.

Arrays are numpy-backed. Operations executed while a :class:`Tape` is active
are recorded on it when any input requires a gradient; :func:`backward` walks
the record in reverse and returns gradients for the leaf tensors.

Broadcasting is deliberately narrow: equal shapes, a 0-d scalar against any
tensor, or a trailing-axis ("bias") operand such as ``(N, C) + (C,)``.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_ids = itertools.count(1)
_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


@dataclass
class Record:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def add(self, record):
        self.records.append(record)
        self._outputs.add(record.output.node_id)

    def __contains__(self, t):
        return t.node_id in self._outputs

    def __len__(self):
        return len(self.records)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return swap_last(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(op, arr, phase="forward"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, phase)


def make_op(op, data, inputs, backward):
    """Wrap ``data`` as the output of ``op`` and record it on the active tape.

    ``backward`` maps the output gradient to a tuple with one entry per input
    (``None`` where no gradient flows).
    """
    check_finite(op, data)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.add(Record(op, tuple(inputs), out, backward))
    return out


# -- broadcasting helpers -------------------------------------------------

def _broadcast_ok(a_shape, b_shape):
    if a_shape == b_shape or len(a_shape) == 0 or len(b_shape) == 0:
        return True
    if len(b_shape) < len(a_shape) and a_shape[-len(b_shape):] == b_shape:
        return True
    if len(a_shape) < len(b_shape) and b_shape[-len(a_shape):] == a_shape:
        return True
    return False


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary(op, a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")
    return a, b


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = _binary("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _binary("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _binary("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op("mul", a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _binary("div", a, b)
    with np.errstate(all="ignore"):  # non-finite results are reported by make_op
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return make_op("div", out, (a, b), bw)


def neg(a):
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    if isinstance(p, Tensor):
        raise ContractError("power: exponent must be a python scalar")
    p = float(p)
    with np.errstate(all="ignore"):
        out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_op("power", out, (a,), bw)


def exp(a):
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a):
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    return make_op("log", out, (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient is zero where clamping was active."""
    mask = (a.data >= lo) & (a.data <= hi)
    return make_op("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# -- reductions and shape ops ---------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return make_op("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    if a.ndim < 2:
        raise DimensionError(f"swap_last: need rank >= 2, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(parts: Sequence[Tensor], axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} differ off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op("concat", out, tuple(parts), bw)


def split(x: Tensor, count: int, axis=0):
    ax = axis % x.ndim
    extent = x.shape[ax]
    if count <= 0 or extent % count:
        raise DimensionError(f"split: extent {extent} on axis {axis} not divisible by {count}")
    step = extent // count
    outs = []
    for i in range(count):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)

        def bw(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(make_op("split", x.data[idx].copy(), (x,), bw))
    return outs


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes.

    Leading (batch) axes must agree, except that a plain 2-D operand is applied
    to every batch entry of the other one.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.ndim > a.ndim:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return make_op("matmul", out, (a, b), bw)


def softmax(x: Tensor, axis=-1):
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax: empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (x,), bw)


# -- differentiation ------------------------------------------------------

def backward(loss: Tensor, tape: Tape):
    """Gradients of scalar ``loss`` for every grad-requiring leaf on ``tape``.

    Returns ``{node_id: Tensor}``. Gradients from fan-out are summed.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss not in tape:
        raise ContractError("backward: loss was not produced on this tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            check_finite(rec.op, gi, "backward")
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = np.asarray(gi, dtype=t.dtype)
            if t not in tape:
                leaves[t.node_id] = t
    return {nid: Tensor(grads[nid], dtype=grads[nid].dtype) for nid in leaves if nid in grads}


def grad(f: Callable[[Tensor], Tensor], x: Tensor):
    """Analytic gradient of scalar ``f`` at ``x`` as an ndarray."""
    x = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    return backward(y, tape)[x.node_id].data


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h=1e-5, indices=None):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. The error per element is ``|a - n| / max(1, |n|)``.
    ``indices`` restricts the comparison to a subset of flat positions.
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y0 = f(Tensor(x64)).data
    check_finite("finite_diff_check", y0)
    analytic = grad(f, Tensor(x64)).ravel()
    flat = x64.ravel()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(Tensor(x64)).data)
        flat[i] = old - h
        fm = float(f(Tensor(x64)).data)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst


def finite_diff_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h=1e-5,
                             samples=None, rng=None):
    """Like :func:`finite_diff_check` but perturbs parameter tensors in place.

    ``loss_fn`` takes no arguments and closes over ``params``. With
    ``samples`` set, that many (tensor, index) entries are drawn at random.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("finite_diff_check_params: parameters must be float64")
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    entries = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if samples is not None and samples < len(entries):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(entries), size=samples, replace=False)
        entries = [entries[k] for k in sorted(pick)]
    worst = 0.0
    for pi, j in entries:
        p = params[pi]
        flat = p.data.reshape(-1)
        g = grads.get(p.node_id)
        a = 0.0 if g is None else g.data.reshape(-1)[j]
        old = flat[j]
        flat[j] = old + h
        fp = float(loss_fn().data)
        flat[j] = old - h
        fm = float(loss_fn().data)
        flat[j] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(a - num) / max(1.0, abs(num)))
    return worst
