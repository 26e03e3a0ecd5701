"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable operation executed while gradients are enabled appends a
record ``(inputs, output, backward_rule)`` to the active :class:`Tape`.
:func:`backward` walks that record list once, in reverse, accumulating
gradients into every tensor that requires them.

Only the operations the captioning model needs are provided.  Elementwise
binary ops follow numpy broadcasting, which the model uses for bias rows and
per-edge scaling; gradients are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double backward, empty tape, ...)."""


class StructuralError(ValueError):
    """Graph structure violates an operation's precondition."""


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.implicit: Tape | None = None
        self.grad_enabled = True


_state = _State()


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced a non-finite value")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager to scope recording; operations run outside any
    ``with Tape()`` block go to an implicit per-thread tape that is replaced
    after each backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        """Zero intermediate gradients so the tape may be replayed backward."""
        for rec in self.records:
            rec.output.grad = np.zeros_like(rec.output.data)
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        start = None
        for i in range(len(self.records) - 1, -1, -1):
            if self.records[i].output is loss:
                start = i
                break
        if start is None:
            raise TapeError("loss is not the output of any recorded operation")
        self.consumed = True
        if _state.implicit is self:
            _state.implicit = None
        loss.grad = loss.grad + 1.0
        for rec in reversed(self.records[: start + 1]):
            g = rec.output.grad
            if not g.any():
                continue
            for inp, gi in zip(rec.inputs, rec.rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad += gi


def _current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    if _state.implicit is None:
        _state.implicit = Tape()
    return _state.implicit


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (inference)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise TapeError("loss has no recorded history (empty tape)")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    t = Tensor._wrap(out)
    if _state.grad_enabled and any(i.requires_grad for i in inputs):
        tape = _current_tape()
        t.requires_grad = True
        t.grad = np.zeros_like(out)
        t.tape = tape
        tape.records.append(_Record(inputs, t, rule))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not agree") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = float(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), rule)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # numerically stable split on sign
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _record(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, rule)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _record(x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean of all elements, or along ``axis``."""
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal entry."""
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise StructuralError("max over an empty axis")
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _record(np.squeeze(out, ax), (x,), rule)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError("softmax over an empty axis")
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, d.shape)
        if not mask.any(axis=ax).all():
            raise ShapeError("softmax: every entry masked along the axis")
        d = np.where(mask, d, -np.inf)
    e = np.exp(d - d.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _record(y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError("log_softmax over an empty axis")
    d = x.data
    z = d - d.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {ax}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError("stack: all shapes must be equal")
    ax = axis % (tensors[0].ndim + 1)
    n = len(tensors)

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def index(x: Tensor, key) -> Tensor:
    """numpy-style indexing; repeated integer indices accumulate gradient."""
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        np.add.at(gx, key, g)
        return (gx,)

    return _record(np.array(x.data[key]), (x,), rule)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (embedding lookup, neighbor gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        # move the gathered axis block to the front so add.at indexes one axis
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        gxm = np.moveaxis(gx, ax, 0)
        np.add.at(gxm, idx, gm)
        return (gx,)

    return _record(np.take(x.data, idx, axis=ax), (x,), rule)


def pick(x: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis`` with the picked axis removed (x[..., indices[...]])."""
    ax = axis % x.ndim
    idx = np.expand_dims(np.asarray(indices, dtype=np.intp), ax)
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _record(np.squeeze(np.take_along_axis(x.data, idx, axis=ax), ax), (x,), rule)


def masked_max(rows: Sequence[Tensor], weights: Sequence[Tensor]) -> Tensor:
    """Coordinatewise max of ``weights[i] * rows[i]``.

    Ties route the gradient to the lowest row index.
    """
    if len(rows) == 0:
        raise StructuralError("masked_max over an empty neighbor list")
    if len(rows) != len(weights):
        raise ShapeError("masked_max: rows and weights differ in length")
    m = stack(list(rows), axis=0)
    w = reshape(stack([reshape(as_tensor(w), ()) for w in weights], axis=0), (len(rows), 1))
    return max_along(mul(m, w), axis=0)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    n_skipped: int

    def __float__(self) -> float:
        return self.max_rel_err


def gradient_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    skip_kinks: bool = True,
    kink_tol: float = 1e-2,
) -> GradCheckResult:
    """Compare backward() against central differences for every coordinate.

    ``f`` is re-evaluated with each coordinate of ``params`` nudged by ``±h``.
    Coordinates where the one-sided slopes disagree by more than ``kink_tol``
    (max ties, hard thresholds) are reported as skipped instead of compared.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("gradient_check needs tensors with requires_grad=True")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        f0 = f().item() if skip_kinks else 0.0
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if skip_kinks:
                    s_fwd, s_bwd = (fp - f0) / h, (f0 - fm) / h
                    if abs(s_fwd - s_bwd) > kink_tol * max(1.0, abs(s_fwd) + abs(s_bwd)):
                        skipped += 1
                        continue
                num = (fp - fm) / (2 * h)
                a = gflat[i]
                err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, err)
                checked += 1
    for p in params:
        p.zero_grad()
    return GradCheckResult(worst, checked, skipped)


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], h: float = 1e-5) -> float:
    """Max coordinatewise relative error between analytic and central-difference gradients."""
    return gradient_check(f, x, h).max_rel_err


def jitter(tensors: Iterable[Tensor], rng: np.random.Generator, scale: float = 1e-3) -> None:
    """Perturb tensors in place so exact max ties become strict."""
    for t in tensors:
        t.data += rng.uniform(-scale, scale, size=t.shape)
