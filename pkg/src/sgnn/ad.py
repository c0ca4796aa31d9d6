"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records primitive operations as they execute; ``Tape.backward``
sweeps the records in reverse, accumulating adjoints.  Every operation in
this module accepts either plain ``numpy`` arrays or ``Var`` handles.  With
plain arrays the computation runs eagerly and nothing is recorded, so layer
code is written once and works for both inference and training.

All values are float64.  Replaying a tape re-executes the recorded forward
callables in order and reproduces every intermediate bit-exactly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TapeError

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Var:
    """A tape-attached value. Do not construct directly; use Tape.var/param."""

    __slots__ = ("value", "tape", "_vid")

    def __init__(self, value: Array, tape: "Tape", vid: int):
        self.value = value
        self.tape = tape
        self._vid = vid

    @property
    def shape(self):
        return self.value.shape

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, vid={self._vid})"


class _Record:
    __slots__ = ("out", "inputs", "fwd", "bwd")

    def __init__(self, out, inputs, fwd, bwd):
        self.out = out
        self.inputs = inputs
        self.fwd = fwd
        self.bwd = bwd


class Grads:
    """Adjoints keyed by variable; zeros for variables the loss never saw."""

    def __init__(self, table: dict):
        self._table = table

    def of(self, var: Var) -> Array:
        g = self._table.get(var._vid)
        if g is None:
            return np.zeros_like(var.value)
        return g


class Tape:
    """Wengert list of primitive ops with per-call state."""

    def __init__(self):
        self._records: list[_Record] = []
        self._param_cache: dict[int, Var] = {}
        self._next_vid = 0

    def _new_var(self, value: Array) -> Var:
        v = Var(value, self, self._next_vid)
        self._next_vid += 1
        return v

    def var(self, value) -> Var:
        """Wrap a leaf value (input) on this tape."""
        return self._new_var(_as_f64(value))

    def param(self, array: Array) -> Var:
        """Wrap a parameter array, cached by identity so every use of the
        same array shares one Var and adjoints accumulate."""
        key = id(array)
        v = self._param_cache.get(key)
        if v is None:
            v = self._new_var(_as_f64(array))
            self._param_cache[key] = v
        return v

    def record(self, out_value: Array, inputs: Sequence[Var], fwd: Callable, bwd: Callable) -> Var:
        out = self._new_var(out_value)
        self._records.append(_Record(out, tuple(inputs), fwd, bwd))
        return out

    def backward(self, output: Var, output_grad) -> Grads:
        """Reverse sweep from ``output`` seeded with ``output_grad``."""
        if not self._records:
            raise TapeError("backward called before any forward was recorded")
        if output.tape is not self:
            raise TapeError("output variable does not belong to this tape")
        seed = _as_f64(output_grad)
        if seed.shape != output.value.shape:
            raise ShapeError(
                f"output grad shape {seed.shape} != value shape {output.value.shape}"
            )
        table: dict[int, Array] = {output._vid: seed}
        for rec in reversed(self._records):
            g = table.get(rec.out._vid)
            if g is None:
                continue
            input_values = [v.value for v in rec.inputs]
            partials = rec.bwd(g, *input_values, rec.out.value)
            for var, pg in zip(rec.inputs, partials):
                if pg is None:
                    continue
                acc = table.get(var._vid)
                table[var._vid] = pg if acc is None else acc + pg
        return Grads(table)

    def replay(self) -> list[Array]:
        """Re-execute every recorded forward in order; returns the recomputed
        output of each record.  Used to assert bit-exact reproducibility."""
        values: dict[int, Array] = {}
        outs = []
        for rec in self._records:
            ins = [values.get(v._vid, v.value) for v in rec.inputs]
            out = rec.fwd(*ins)
            values[rec.out._vid] = out
            outs.append(out)
        return outs


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _value(x) -> Array:
    return x.value if isinstance(x, Var) else _as_f64(x)


def _wrap(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.var(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    va, vb = _wrap(a, tape), _wrap(b, tape)
    return tape.record(out, (va, vb), fwd, bwd)


def _unary(a, fwd, bwd):
    tape = _tape_of(a)
    av = _value(a)
    out = fwd(av)
    if tape is None:
        return out
    return tape.record(out, (_wrap(a, tape),), fwd, bwd)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    return _binary(
        a, b, np.add,
        lambda g, av, bv, ov: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    return _binary(
        a, b, np.subtract,
        lambda g, av, bv, ov: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    return _binary(
        a, b, np.multiply,
        lambda g, av, bv, ov: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, av, bv, ov: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
    )


def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")

    def bwd(g, av, bv, ov):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _binary(a, b, np.matmul, bwd)


def sqrt(a):
    def bwd(g, av, ov):
        return (g * (0.5 / ov),)

    return _unary(a, np.sqrt, bwd)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    def fwd(av):
        return av * _sigmoid(av)

    def bwd(g, av, ov):
        s = _sigmoid(av)
        return (g * (s * (1.0 + av * (1.0 - s))),)

    return _unary(a, fwd, bwd)


def relu(a):
    def bwd(g, av, ov):
        return (g * (av > 0.0),)

    return _unary(a, lambda av: np.maximum(av, 0.0), bwd)


# ------------------------------------------------------------- shape plumbing

def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g, av, ov):
        return (g.reshape(av.shape),)

    return _unary(a, lambda av: av.reshape(shape), bwd)


def swap_last2(a):
    def fwd(av):
        return np.swapaxes(av, -1, -2)

    return _unary(a, fwd, lambda g, av, ov: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence, axis: int):
    tape = _tape_of(*parts)
    values = [_value(p) for p in parts]
    sizes = [v.shape[axis] for v in values]

    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    out = fwd(*values)
    if tape is None:
        return out

    offsets = np.cumsum([0] + sizes)

    def bwd(g, *rest):
        grads = []
        for k in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return tape.record(out, [_wrap(p, tape) for p in parts], fwd, bwd)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice along one axis."""

    def make_slicer(ndim):
        sl = [slice(None)] * ndim
        sl[axis] = slice(start, start + length)
        return tuple(sl)

    def fwd(av):
        return av[make_slicer(av.ndim)].copy()

    def bwd(g, av, ov):
        out = np.zeros_like(av)
        out[make_slicer(av.ndim)] = g
        return (out,)

    return _unary(a, fwd, bwd)


def gather(a, index: np.ndarray, axis: int = 0):
    """Fancy-index rows along ``axis`` (index is a constant int array)."""
    index = np.asarray(index, dtype=np.int64)
    if axis != 0:
        raise ShapeError("gather supports axis=0 only")

    def fwd(av):
        return av[index]

    def bwd(g, av, ov):
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return (out,)

    return _unary(a, fwd, bwd)


def segment_sum(a, segments: np.ndarray, num_segments: int):
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments, dtype=np.int64)

    def fwd(av):
        out = np.zeros((num_segments,) + av.shape[1:], dtype=av.dtype)
        np.add.at(out, segments, av)
        return out

    def bwd(g, av, ov):
        return (g[segments],)

    return _unary(a, fwd, bwd)


def sum_(a, axis=None, keepdims: bool = False):
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def fwd(av):
        return av.sum(axis=axis, keepdims=keepdims)

    def bwd(g, av, ov):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _unary(a, fwd, bwd)


def value_of(x) -> Array:
    """Plain numpy view of a Var or array."""
    return _value(x)


def backward(tape: Tape, output: Var, output_grad) -> Grads:
    """Functional alias for ``Tape.backward``."""
    return tape.backward(output, output_grad)
