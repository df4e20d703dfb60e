"""Minimal define-by-run reverse-mode differentiation over numpy float64 arrays.

Operations executed while a :class:`ComputationRecord` is active are appended
to it; :func:`backward` replays the record in reverse to accumulate gradients
into the leaves.  Outside of any record, operations simply compute values,
which is what inference and finite-difference probes use.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Array", "ComputationRecord", "ShapeError", "GradientError",
    "primitive", "record_op", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "relu", "absolute",
    "softmax", "sum_", "mean", "concat", "slice_", "transpose", "reshape",
    "stop_gradient", "where",
    "AdamState", "Adam", "adam_step", "FDReport", "finite_diff_check",
    "glorot_uniform", "make_rng",
]


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""

    def __init__(self, kind: str, *shapes, detail: str = ""):
        self.kind = kind
        self.shapes = shapes
        msg = f"{kind}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


class Array:
    """A float64 array that can take part in a computation record."""

    __array_priority__ = 100  # make ndarray <op> Array dispatch to Array

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


def _lift(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


# ----------------------------------------------------------------------------
# computation record

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "records"):
        _state.records = []
    return _state.records


@dataclass
class Step:
    kind: str
    inputs: tuple
    output: Array
    vjp: Callable


class ComputationRecord:
    """Ordered log of primitive applications, usable as a context manager."""

    def __init__(self):
        self.steps: list[Step] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "ComputationRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self) -> int:
        return len(self.steps)

    def _append(self, step: Step) -> None:
        self._produced[id(step.output)] = len(self.steps)
        self.steps.append(step)

    def produced(self, arr: Array) -> bool:
        return id(arr) in self._produced

    def leaves(self) -> list[Array]:
        seen, out = set(), []
        for step in self.steps:
            for a in step.inputs:
                if a.requires_grad and id(a) not in self._produced and id(a) not in seen:
                    seen.add(id(a))
                    out.append(a)
        return out

    def backward(self, loss: Array) -> dict:
        return backward(self, loss)


def record_op(kind: str, value: np.ndarray, inputs: Sequence[Array], vjp: Callable) -> Array:
    """Wrap ``value`` as the output of a primitive and log it if needed.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    needs = any(a.requires_grad for a in inputs)
    out = Array(value, requires_grad=needs)
    stack = _stack()
    if needs and stack:
        stack[-1]._append(Step(kind, tuple(inputs), out, vjp))
    return out


def backward(record: ComputationRecord, loss: Array) -> dict:
    """Reverse sweep; sets ``.grad`` on every reached leaf and returns {leaf: grad}."""
    if loss.value.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    if not record.produced(loss):
        raise GradientError("loss was not produced by this computation record")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Array] = {}
    for step in reversed(record.steps):
        g = grads.pop(id(step.output), None)
        if g is None:
            continue
        for inp, gi in zip(step.inputs, step.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not record.produced(inp):
                leaves[key] = inp
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.value))
        result[leaf] = leaf.grad
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Array, b: Array) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# primitives

def add(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    return record_op("add", a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("subtract", a, b)
    return record_op("subtract", a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("multiply", a, b)
    return record_op("multiply", a.value * b.value, (a, b),
                     lambda g: (_unbroadcast(g * b.value, a.shape),
                                _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("divide", a, b)
    out = a.value / b.value
    return record_op("divide", out, (a, b),
                     lambda g: (_unbroadcast(g / b.value, a.shape),
                                _unbroadcast(-g * out / b.value, b.shape)))


def neg(a) -> Array:
    a = _lift(a)
    return record_op("negate", -a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Array:
    a = _lift(a)
    c = float(c)
    return record_op("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Array:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes") from None
    out = np.matmul(a.value, b.value)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return record_op("matmul", out, (a, b), vjp)


def relu(a) -> Array:
    a = _lift(a)
    keep = a.value > 0
    return record_op("relu", np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,))


def absolute(a) -> Array:
    a = _lift(a)
    sign = np.sign(a.value)
    return record_op("abs", np.abs(a.value), (a,), lambda g: (g * sign,))


def softmax(a, mask=None) -> Array:
    """Softmax over the last axis; entries where ``mask`` is 0 get zero weight.

    Every row must keep at least one entry.
    """
    a = _lift(a)
    if not np.all(np.isfinite(a.value)):
        raise ValueError("softmax: input contains non-finite values")
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return record_op("softmax", y, (a,),
                     lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Array:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Array:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return record_op("mean", out, (a,), vjp)


def concat(arrays: Sequence, axis: int = -1) -> Array:
    arrays = [_lift(x) for x in arrays]
    try:
        out = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in arrays]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]
    return record_op("concat", out, tuple(arrays),
                     lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_(a, index) -> Array:
    a = _lift(a)
    try:
        out = a.value[index]
    except IndexError:
        raise ShapeError("slice", a.shape, detail=f"index {index!r}") from None

    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op("slice", np.array(out), (a,), vjp)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def transpose(a, axes=None) -> Array:
    """Permute axes; the default swaps the last two."""
    a = _lift(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="needs at least 2 axes")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", np.transpose(a.value, axes), (a,),
                     lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Array:
    a = _lift(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return record_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def stop_gradient(a) -> Array:
    """Copy of ``a``; gradients arriving at the copy are discarded."""
    a = _lift(a)
    return record_op("stop_gradient", a.value.copy(), (a,), lambda g: (None,))


def where(cond, a, b) -> Array:
    """Select elementwise from ``a`` where the constant ``cond`` holds, else ``b``."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from None
    c = np.broadcast_to(cond, shape)
    return record_op("where", np.where(c, a.value, b.value), (a, b),
                     lambda g: (_unbroadcast(np.where(c, g, 0.0), a.shape),
                                _unbroadcast(np.where(c, 0.0, g), b.shape)))


_PRIMITIVES = {
    "add": add, "subtract": sub, "multiply": mul, "divide": div, "negate": neg,
    "scale": scale, "matmul": matmul, "relu": relu, "abs": absolute,
    "softmax": softmax, "sum": sum_, "mean": mean, "concat": concat,
    "slice": slice_, "transpose": transpose, "reshape": reshape,
    "stop_gradient": stop_gradient, "where": where,
}


def primitive(kind: str, *inputs, **kwargs) -> Array:
    """Apply a primitive by name, e.g. ``primitive("relu", x)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Array], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p.value) for p in params],
                   v=[np.zeros_like(p.value) for p in params], **hyper)


def adam_step(params: Sequence[Array], grads: Sequence, state: AdamState):
    """One bias-corrected Adam update, in place.  ``None`` grads count as zero."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step", (len(params),), (len(grads),), (len(state.m),),
                         detail="parameter/gradient/state counts differ")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, m.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Array], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class FDReport:
    errors: list = field(default_factory=list)  # per leaf: max relative error
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_diff_check(function: Callable, leaves: Sequence[Array], step: float = 1e-5,
                      tolerance: float = 1e-4, atol: float = 1e-8, entries: int | None = None,
                      rng: np.random.Generator | None = None) -> FDReport:
    """Compare recorded gradients of ``function(*leaves)`` with central differences.

    The error for one leaf is ``max|a - n| / max(max|a|, max|n|, atol)``, i.e.
    relative to the largest gradient entry of that leaf. With ``entries`` set, only
    that many randomly chosen coordinates per leaf are differenced; the
    denominator still uses the full analytic gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with ComputationRecord() as rec:
        out = function(*leaves)
    if out.value.size != 1:
        raise GradientError(f"function output must be scalar, got shape {out.shape}")
    backward(rec, out)
    report = FDReport(tolerance=tolerance)
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        numeric = np.zeros_like(leaf.value)
        flat = leaf.value.reshape(-1)
        coords = np.arange(flat.size)
        if entries is not None and entries < flat.size:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, entries, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(function(*leaves).value)
            flat[i] = orig - step
            fm = float(function(*leaves).value)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), atol)
        diff = np.abs(analytic.reshape(-1)[coords] - numeric.reshape(-1)[coords])
        report.errors.append(float(diff.max(initial=0.0) / denom))
    return report


# ----------------------------------------------------------------------------
# initialisation helpers

def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
