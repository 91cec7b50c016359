"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Applying a primitive to tensors
where at least one input is grad-tracked appends a record to the innermost
active :class:`Tape`; :func:`backward` replays those records in reverse.

    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True)
        loss = (w * w).sum()
        grads = tape.backward(loss)

Broadcasting is deliberately narrow: binary elementwise primitives accept
operands whose shapes differ only when the smaller one expands to the
larger along leading axes or size-1 axes (right-aligned), and the result
always has the larger operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes violate a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A primitive or a checked function produced inf or nan."""


class TapeError(RuntimeError):
    """Tape misuse: no active tape, or a loss that does not live on it."""


class UnknownPrimitiveError(KeyError):
    pass


class NotDifferentiableError(TypeError):
    """A piecewise-constant primitive (argmax) saw a grad-tracked input."""


_DTYPE = [np.float64]


class extended_precision:
    """Context in which new tensors use the platform's long double.

    Only the finite-difference oracle uses this, to push its roundoff
    well below the gradients it checks.
    """

    def __enter__(self):
        _DTYPE.append(np.longdouble)

    def __exit__(self, *exc):
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_index", "name", "__weakref__")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE[-1])
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; every operator routes through apply_primitive
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict


@dataclass(eq=False)
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self
        # records and outputs point at each other; drop them now rather
        # than waiting for the cycle collector
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, wrt=None):
        if active_tape() is not self:
            raise TapeError("tape is not the active tape")
        return backward(loss, wrt)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    # backward(g, saved, xs, out, needs, **attrs) -> per-input gradient or None
    backward: Callable | None
    doc: str = ""


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, doc: str = ""):
    def register(fwd):
        PRIMITIVES[name] = Primitive(fwd, None, doc)
        fwd.defvjp = lambda bwd: PRIMITIVES.__setitem__(name, Primitive(fwd, bwd, doc))
        return fwd

    return register


def apply_primitive(op_id: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``op_id`` on ``inputs``; tape it when any input is tracked."""
    try:
        prim = PRIMITIVES[op_id]
    except KeyError:
        raise UnknownPrimitiveError(op_id) from None
    tensors = tuple([x if isinstance(x, Tensor) else Tensor(x) for x in inputs])
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_data, saved = prim.forward(*[t.data for t in tensors], **attrs)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"primitive {op_id!r} produced non-finite values")
    out = Tensor(out_data)
    if any(t.requires_grad for t in tensors):
        if prim.backward is None:
            raise NotDifferentiableError(f"primitive {op_id!r} has no gradient")
        tape = active_tape()
        if tape is None:
            raise TapeError(f"grad-tracked input to {op_id!r} outside any Tape")
        for t in tensors:
            if t.requires_grad and t._tape is not None and t._tape is not tape:
                raise TapeError(f"input to {op_id!r} was produced on another tape")
        out.requires_grad = True
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append(Record(op_id, tensors, out, saved, attrs))
    return out


def backward(loss: Tensor, wrt=None):
    """Gradients of scalar ``loss`` with respect to grad-tracked leaves.

    With ``wrt=None`` returns ``{leaf: grad}`` for every leaf reached.  With a
    mapping of name to leaf returns ``{name: grad}``; with a sequence, a list.
    Requested leaves the loss does not depend on get zero gradients.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape is not active_tape():
        raise TapeError("loss is not on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: loss._index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        in_grads = PRIMITIVES[rec.op].backward(
            g, rec.saved, [t.data for t in rec.inputs], rec.output.data, needs, **rec.attrs
        )
        for t, gt, need in zip(rec.inputs, in_grads, needs):
            if not need or gt is None:
                continue
            key = id(t)
            if t._tape is None:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gt if prev is None else prev + gt

    found = {leaves[k]: Tensor(grads[k]) for k in leaves}
    if wrt is None:
        return found
    if isinstance(wrt, Mapping):
        return {name: found.get(t, Tensor(np.zeros(t.shape))) for name, t in wrt.items()}
    return [found.get(t, Tensor(np.zeros(t.shape))) for t in wrt]


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_to_larger(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: two-sided broadcast {a.shape} with {b.shape} not supported")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# primitives


@primitive("add", "elementwise a + b; right-aligned one-sided broadcast")
def _add_fwd(a, b):
    _broadcast_to_larger(a, b, "add")
    return a + b, None


_add_fwd.defvjp(lambda g, s, xs, out, needs: (
    _unbroadcast(g, xs[0].shape) if needs[0] else None,
    _unbroadcast(g, xs[1].shape) if needs[1] else None,
))


@primitive("sub", "elementwise a - b; broadcast as add")
def _sub_fwd(a, b):
    _broadcast_to_larger(a, b, "sub")
    return a - b, None


_sub_fwd.defvjp(lambda g, s, xs, out, needs: (
    _unbroadcast(g, xs[0].shape) if needs[0] else None,
    _unbroadcast(-g, xs[1].shape) if needs[1] else None,
))


@primitive("multiply", "elementwise a * b; broadcast as add")
def _mul_fwd(a, b):
    _broadcast_to_larger(a, b, "multiply")
    return a * b, None


_mul_fwd.defvjp(lambda g, s, xs, out, needs: (
    _unbroadcast(g * xs[1], xs[0].shape) if needs[0] else None,
    _unbroadcast(g * xs[0], xs[1].shape) if needs[1] else None,
))


@primitive("divide", "elementwise a / b; broadcast as add")
def _div_fwd(a, b):
    _broadcast_to_larger(a, b, "divide")
    return a / b, None


_div_fwd.defvjp(lambda g, s, xs, out, needs: (
    _unbroadcast(g / xs[1], xs[0].shape) if needs[0] else None,
    _unbroadcast(-g * out / xs[1], xs[1].shape) if needs[1] else None,
))


@primitive("matmul", "(..., m, k) @ (..., k, n); batch axes equal, or right operand 2-D")
def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    return np.matmul(a, b), None


def _matmul_bwd(g, s, xs, out, needs):
    a, b = xs
    ga = gb = None
    if needs[0]:
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if needs[1]:
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


_matmul_fwd.defvjp(_matmul_bwd)


@primitive("transpose", "permute axes; axes=None reverses them")
def _transpose_fwd(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    return np.transpose(a, axes), None


_transpose_fwd.defvjp(lambda g, s, xs, out, needs, axes=None: (
    np.transpose(g, None if axes is None else np.argsort(axes)),
))


@primitive("reshape", "same elements, new shape")
def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None


_reshape_fwd.defvjp(lambda g, s, xs, out, needs, shape: (g.reshape(xs[0].shape),))


@primitive("concat", "join along an existing axis; other axes must agree")
def _concat_fwd(*xs, axis=0):
    try:
        return np.concatenate(xs, axis=axis), None
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None


def _concat_bwd(g, s, xs, out, needs, axis=0):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_concat_fwd.defvjp(_concat_bwd)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


@primitive("slice", "numpy indexing: basic slices or integer-array gathers")
def _slice_fwd(a, index):
    try:
        out = a[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    return np.array(out), None


def _slice_bwd(g, s, xs, out, needs, index):
    full = np.zeros_like(xs[0])
    if _is_advanced(index):
        np.add.at(full, index, g)
    else:
        full[index] = g
    return (full,)


_slice_fwd.defvjp(_slice_bwd)


@primitive("sum", "reduce over axes")
def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _expand_reduced(g, shape, axis, keepdims):
    if not keepdims:
        g = np.expand_dims(g, _norm_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


_sum_fwd.defvjp(lambda g, s, xs, out, needs, axis=None, keepdims=False: (
    np.array(_expand_reduced(g, xs[0].shape, axis, keepdims)),
))


@primitive("mean", "average over axes")
def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _mean_bwd(g, s, xs, out, needs, axis=None, keepdims=False):
    shape = xs[0].shape
    count = int(np.prod([shape[i] for i in _norm_axes(axis, len(shape))]))
    return (_expand_reduced(g, shape, axis, keepdims) / count,)


_mean_fwd.defvjp(_mean_bwd)


@primitive("exp")
def _exp_fwd(a):
    return np.exp(a), None


_exp_fwd.defvjp(lambda g, s, xs, out, needs: (g * out,))


@primitive("log", "natural log; non-positive inputs surface as NonFiniteError")
def _log_fwd(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a), None


_log_fwd.defvjp(lambda g, s, xs, out, needs: (g / xs[0],))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@primitive("sigmoid")
def _sigmoid_fwd(a):
    return _sigmoid(a), None


_sigmoid_fwd.defvjp(lambda g, s, xs, out, needs: (g * out * (1.0 - out),))


@primitive("silu", "x * sigmoid(x)")
def _silu_fwd(a):
    sig = _sigmoid(a)
    return a * sig, sig


_silu_fwd.defvjp(lambda g, sig, xs, out, needs: (g * (sig + xs[0] * sig * (1.0 - sig)),))


@primitive("softplus", "log(1 + exp(x)), evaluated stably")
def _softplus_fwd(a):
    return np.logaddexp(0.0, a), None


_softplus_fwd.defvjp(lambda g, s, xs, out, needs: (g * _sigmoid(xs[0]),))


@primitive("power", "elementwise a ** exponent for a constant exponent")
def _power_fwd(a, exponent):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.power(a, exponent), None


_power_fwd.defvjp(lambda g, s, xs, out, needs, exponent: (
    g * exponent * np.power(xs[0], exponent - 1),
))


@primitive("softmax", "last-axis softmax; keys where `where` is False get exactly 0")
def _softmax_fwd(a, where=None):
    if where is None:
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        where = np.broadcast_to(where, a.shape)
        if not where.any(axis=-1).all():
            raise ShapeError("softmax: a row has no allowed entries")
        m = np.where(where, a, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(where, np.exp(np.where(where, a - m, 0.0)), 0.0)
    return e / e.sum(axis=-1, keepdims=True), None


_softmax_fwd.defvjp(lambda g, s, xs, out, needs, where=None: (
    out * (g - (g * out).sum(axis=-1, keepdims=True)),
))


@primitive("log_softmax", "last-axis log-softmax")
def _log_softmax_fwd(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


_log_softmax_fwd.defvjp(lambda g, s, xs, out, needs: (
    g - np.exp(out) * g.sum(axis=-1, keepdims=True),
))


@primitive("broadcast", "expand to `shape` along leading or size-1 axes")
def _broadcast_fwd(a, shape):
    shape = tuple(shape)
    try:
        if np.broadcast_shapes(a.shape, shape) != shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
    return np.array(np.broadcast_to(a, shape)), None


_broadcast_fwd.defvjp(lambda g, s, xs, out, needs, shape: (_unbroadcast(g, xs[0].shape),))


@primitive("argmax", "index of the last-axis maximum; not differentiable")
def _argmax_fwd(a):
    return np.argmax(a, axis=-1).astype(a.dtype), None


# ---------------------------------------------------------------------------
# functional wrappers


def add(a, b) -> Tensor:
    return apply_primitive("add", (a, b))


def sub(a, b) -> Tensor:
    return apply_primitive("sub", (a, b))


def mul(a, b) -> Tensor:
    return apply_primitive("multiply", (a, b))


def div(a, b) -> Tensor:
    return apply_primitive("divide", (a, b))


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def transpose(a, axes=None) -> Tensor:
    return apply_primitive("transpose", (a,), axes=None if axes is None else tuple(axes))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    if len(xs) == 1:
        return as_tensor(xs[0])
    return apply_primitive("concat", tuple(xs), axis=axis)


def slice_(a, index) -> Tensor:
    return apply_primitive("slice", (a,), index=index)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def exp(a) -> Tensor:
    return apply_primitive("exp", (a,))


def log(a) -> Tensor:
    return apply_primitive("log", (a,))


def sigmoid(a) -> Tensor:
    return apply_primitive("sigmoid", (a,))


def silu(a) -> Tensor:
    return apply_primitive("silu", (a,))


def softplus(a) -> Tensor:
    return apply_primitive("softplus", (a,))


def power(a, exponent: float) -> Tensor:
    return apply_primitive("power", (a,), exponent=float(exponent))


def softmax(a, where=None) -> Tensor:
    return apply_primitive("softmax", (a,), where=where)


def log_softmax(a) -> Tensor:
    return apply_primitive("log_softmax", (a,))


def broadcast(a, shape) -> Tensor:
    return apply_primitive("broadcast", (a,), shape=tuple(shape))


def argmax(a) -> Tensor:
    return apply_primitive("argmax", (a,))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# finite-difference oracle


def leaves(params: Mapping[str, Any], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap a name -> array mapping as fresh leaf tensors."""
    return {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64),
                      requires_grad=requires_grad) for k, v in params.items()}


def finite_difference_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Any],
    step: float = 1e-5,
    *,
    details: bool = False,
    extended: bool = True,
    screen: float | None = 1e-6,
):
    """Compare taped float64 gradients of ``fn`` against central differences.

    ``fn`` maps a dict of tensors to a scalar tensor and must be deterministic.
    Returns ``max |analytic - fd| / (|fd| + 1e-12)`` over every coordinate of
    every parameter; with ``details=True`` also the worst ``(name, index)``.

    In float64 the difference quotient carries about ``eps * |f| / step``
    (~1e-11) of roundoff, which swamps coordinates whose gradient is below
    ~1e-6.  With ``extended`` set, every coordinate is first differenced in
    float64 and any whose error exceeds ``screen`` is differenced again with
    both evaluations in long double; that second value is the one reported.
    ``screen=None`` runs every coordinate in long double.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            for k, v in params.items()}

    tracked = leaves(base)
    with Tape() as tape:
        loss = fn(tracked)
        _check_scalar(loss)
        analytic = {k: g.data for k, g in tape.backward(loss, tracked).items()}

    def errors(dtype, only=None):
        probe = {k: v.astype(dtype) for k, v in base.items()}
        h = dtype(step)
        out = {}
        for name, arr in probe.items():
            frozen = {k: Tensor(v) for k, v in probe.items() if k != name}
            flat = arr.reshape(-1)
            grad = analytic[name].reshape(-1)
            indices = range(flat.size) if only is None else only.get(name, ())
            errs = np.zeros(flat.size)
            for i in indices:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = _scalar_value(fn({**frozen, name: Tensor(arr)}))
                flat[i] = orig - h
                f_minus = _scalar_value(fn({**frozen, name: Tensor(arr)}))
                flat[i] = orig
                fd = float((f_plus - f_minus) / (2 * h))
                errs[i] = abs(grad[i] - fd) / (abs(fd) + 1e-12)
            out[name] = errs
        return out

    if not extended:
        errs = errors(np.float64)
    elif screen is None:
        with extended_precision():
            errs = errors(np.longdouble)
    else:
        errs = errors(np.float64)
        redo = {k: np.flatnonzero(e > screen) for k, e in errs.items()}
        if any(len(v) for v in redo.values()):
            with extended_precision():
                again = errors(np.longdouble, redo)
            for k, idx in redo.items():
                errs[k][idx] = again[k][idx]

    worst, where = 0.0, None
    for name, e in errs.items():
        if e.size and (where is None or e.max() > worst):
            i = int(e.argmax())
            worst, where = float(e[i]), (name, tuple(int(j) for j in np.unravel_index(i, base[name].shape)))
    return (worst, where) if details else worst


def _check_scalar(loss) -> None:
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("checked function must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("checked function returned a non-finite value")


def _scalar_value(loss):
    _check_scalar(loss)
    return loss.data.reshape(())[()]
