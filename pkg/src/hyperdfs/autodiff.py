"""Dense reverse-mode automatic differentiation on a recording tape.

Tensors wrap float64 NumPy arrays. Operations are recorded only while a
:class:`Tape` is active (``with Tape() as tape: ...``); outside a tape every
operation is a plain forward computation, which is what inference uses.

Broadcasting follows NumPy rules; backward rules sum gradients back onto the
operand shape.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

# storage dtype; only finite_diff_check switches it, to build its reference
_FLOAT = np.float64
_KINK_PROBES: list[list[float]] = []

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "NumericDomainError",
    "DegenerateDistributionError",
    "TapeStateError",
    "tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "square",
    "sqrt",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "detach",
    "straight_through",
    "finite_diff_check",
    "kink_margin",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An operand lies outside the domain of the operation, or a forward
    pass produced a non-finite value from finite inputs."""


class DegenerateDistributionError(ArithmeticError):
    """Softmax over a slice whose entries are all -inf."""


class TapeStateError(RuntimeError):
    """Misuse of the tape: double backward, non-scalar loss, off-tape loss."""


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_FLOAT, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=_FLOAT)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._recorded = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    which is a topological order of the graph.

    A tape supports exactly one backward sweep. Call :meth:`reset` before
    recording a new forward pass on the same tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeStateError("tape already consumed by backward(); call reset() first")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._recorded = False
            node.out.requires_grad = False
        self.nodes = []
        self.consumed = False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tape = self
        out._recorded = True
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeStateError("backward() called twice on the same tape without reset()")
        if loss.data.size != 1:
            raise TapeStateError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # buffers this sweep allocated and may update in place
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            owned.discard(key)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._recorded:
                    key = id(parent)
                    prev = grads.get(key)
                    if prev is None:
                        grads[key] = pg
                    elif key in owned:
                        prev += pg
                    else:
                        grads[key] = prev + pg
                        owned.add(key)
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across separate tapes; callers zero them per
    optimisation step.
    """
    if loss._tape is None:
        if loss.data.size != 1:
            raise TapeStateError(f"backward() needs a scalar loss, got shape {loss.shape}")
        raise TapeStateError("loss carries no recorded graph (was it computed under a Tape?)")
    loss._tape.backward(loss)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, inputs: Sequence[np.ndarray], op: str) -> None:
    if np.isfinite(out).all():
        return
    # -inf sentinels may propagate (masked scores); new non-finite values may not
    if np.isnan(out).any() or np.isposinf(out).any() or all(np.isfinite(a).all() for a in inputs):
        raise NumericDomainError(f"{op}: forward pass produced non-finite values")


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, [p.data for p in parents], op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._recorded = False
    if _ACTIVE and any(p.requires_grad for p in parents):
        _ACTIVE[-1].record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if (b.data == 0).any():
        raise NumericDomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch shapes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _emit(a.data @ b.data, (a, b), bw, "matmul")


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _emit as a domain error
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise NumericDomainError("log: operand must be strictly positive")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    if _KINK_PROBES:
        _KINK_PROBES[-1].append(float(np.abs(a.data).min()))
    on = a.data > 0
    return _emit(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise NumericDomainError("sqrt: operand must be non-negative")
    out = np.sqrt(a.data)
    if (out == 0).any() and a.requires_grad and _ACTIVE:
        raise NumericDomainError("sqrt: derivative undefined at 0")
    return _emit(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


_UNARY = {"exp": exp, "log": log, "tanh": tanh, "relu": relu, "square": square, "sqrt": sqrt, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a pointwise op by name."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------ shape handling


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], dtype=_FLOAT)

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(out, (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def take_rows(a, rows) -> Tensor:
    """Gather rows along axis 0 (repeats allowed; gradients scatter-add)."""
    rows = np.asarray(rows, dtype=np.intp)
    return _getitem(_as_tensor(a), rows)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(parts), bw, "concat")


def detach(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.copy())


def straight_through(soft, hard) -> Tensor:
    """Forward value ``hard`` exactly; gradient routed to ``soft`` unchanged."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=_FLOAT)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: shapes {soft.shape} and {hard.shape} differ")
    return _emit(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# --------------------------------------------------------- fused primitives


def softmax(x, axis: int = -1) -> Tensor:
    """Max-stabilised softmax. -inf entries map to exactly 0."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError("softmax: every entry along the axis is -inf")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), bw, "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then apply gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    With ``weights`` the mean is weighted; all-zero weights give a zero loss.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be B x C, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows of logits but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c})")
    w = np.ones(n, dtype=_FLOAT) if weights is None else np.asarray(weights, dtype=_FLOAT)
    total = w.sum()
    scale = w / total if total > 0 else np.zeros(n)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.asarray(-(scale * logp[rows, labels]).sum())

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * scale[:, None] * p,)

    return _emit(out, (logits,), bw, "cross_entropy")


# -------------------------------------------------------------- verification


@contextmanager
def kink_probe() -> Iterator[list[float]]:
    """Collects, per relu call, the smallest |input|: the distance to the kink."""
    record: list[float] = []
    _KINK_PROBES.append(record)
    try:
        yield record
    finally:
        _KINK_PROBES.pop()


def kink_margin(f: Callable[[], Tensor]) -> float:
    """Smallest distance of any relu input to 0 in one evaluation of ``f``
    (inf when ``f`` has no relu). Central differences with a step above this
    may straddle a non-differentiable point."""
    with kink_probe() as record:
        f()
    return min(record, default=float("inf"))


def finite_diff_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    reference_dtype=np.longdouble,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a closure recomputing a scalar loss from the current contents of
    ``inputs``; it must be deterministic. Relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-8)``. With ``max_coords`` only a
    random sample of coordinates per input is perturbed.

    The central differences are evaluated in ``reference_dtype`` (extended
    precision where the platform has it) so the reference is not limited by
    float64 round-off of O(1) losses; the analytic gradient under test is the
    ordinary float64 tape result.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    base = float(loss.data)
    if float(f().data) != base:
        raise RuntimeError("finite_diff_check: f is not deterministic (repeat evaluation differs)")
    rng = rng if rng is not None else np.random.default_rng(0)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    saved = [t.data for t in inputs]
    global _FLOAT
    previous = _FLOAT
    worst = 0.0
    try:
        _FLOAT = reference_dtype
        for t in inputs:
            t.data = t.data.astype(reference_dtype)
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = f().data.reshape(-1)[0]
                flat[i] = orig - step
                down = f().data.reshape(-1)[0]
                flat[i] = orig
                numeric = float((up - down) / (2 * reference_dtype(step)))
                a = float(grad.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    finally:
        _FLOAT = previous
        for t, data in zip(inputs, saved):
            t.data = data
    return worst
