"""Dense float32 tensors with a reverse-mode tape.

Every primitive is a :class:`Function` whose forward works on numpy arrays and
whose backward is written with Tensor operations. Running the backward pass
with ``create_graph=True`` therefore records a second graph over the gradient
expression, which is what the exact second-order architecture step needs.

Repeated ``backward`` calls on the same graph accumulate into ``.grad``; the
graph is never freed. Call ``zero_grad`` between passes to get identical
gradients again.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from metadapt.errors import DimensionError, GraphError, NumericError

DTYPE = np.float32

_check_finite = True
_state = threading.local()


@contextlib.contextmanager
def grad_mode(enabled: bool):
    """Per-thread switch for graph recording."""
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p: float):
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        axes = _norm_axis(axis, self.ndim)
        count = self.size if axes is None else int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axes, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    # -- autodiff entry points ------------------------------------------
    def backward(self, grad=None, create_graph: bool = False) -> None:
        backward(self, grad, create_graph=create_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_axis(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Function:
    """Base class of recorded primitives.

    Subclasses take their static arguments as keyword arguments to
    ``apply``; those land in ``__init__``. ``forward`` sees plain arrays and
    ``backward`` returns one Tensor (or None) per input.
    """

    inputs: tuple[Tensor, ...] = ()

    def __init__(self, **kwargs):
        for k, v in kwargs.items():
            setattr(self, k, v)

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(**kwargs)
        out = fn.forward(*(t.data for t in tensors))
        result = Tensor(out)
        if _check_finite and result.data.size and not np.isfinite(result.data).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.inputs = tensors
            result.requires_grad = True
            result._ctx = fn
        return result

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError


# ----------------------------------------------------------------------
# tape construction and the backward engine
# ----------------------------------------------------------------------


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Tape:
    """Topologically ordered view of the graph that produced ``root``."""

    nodes: list[Tensor]
    records: list[TapeRecord] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        records = [
            TapeRecord(type(t._ctx).__name__, tuple(id(p) for p in t._ctx.inputs), id(t))
            for t in order
            if t._ctx is not None
        ]
        return cls(order, records)


def _backprop(root: Tensor, seed: Tensor, create_graph: bool, wanted: set[int] | None):
    if not root.requires_grad:
        raise GraphError("tensor does not require grad; the graph is detached")
    tape = Tape.from_output(root)
    grads: dict[int, Tensor] = {id(root): seed}
    found: dict[int, Tensor] = {}
    with grad_mode(create_graph):
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None or (wanted is not None and id(node) in wanted):
                found[id(node)] = g
                if node._ctx is None:
                    continue
            in_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return tape, found


def _seed_for(root: Tensor, grad) -> Tensor:
    if grad is None:
        if root.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {root.shape}")
        return Tensor(np.ones(root.shape, dtype=DTYPE))
    g = as_tensor(grad)
    if g.shape != root.shape:
        raise DimensionError(f"seed gradient shape {g.shape} != output shape {root.shape}")
    return g


def backward(root: Tensor, grad=None, create_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requiring leaf."""
    seed = _seed_for(root, grad)
    tape, found = _backprop(root, seed, create_graph, None)
    for node in tape.nodes:
        g = found.get(id(node))
        if g is None or node._ctx is not None:
            continue
        node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output=None,
    create_graph: bool = False,
    allow_unused: bool = True,
) -> list[Tensor]:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    Unused inputs get a zero tensor. With ``create_graph`` the returned
    gradients are themselves differentiable.
    """
    inputs = list(inputs)
    seed = _seed_for(output, grad_output)
    _, found = _backprop(output, seed, create_graph, {id(t) for t in inputs})
    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            if not allow_unused:
                raise GraphError("an input is not reachable from the output")
            g = Tensor(np.zeros(t.shape, dtype=DTYPE))
        result.append(g)
    return result


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------


def unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = Sum.apply(g, axis=axes, keepdims=True) if axes else g
    return Reshape.apply(out, shape=shape)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g * b, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g / b, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    p: float

    def forward(self, a):
        return a**self.p

    def backward(self, g):
        (a,) = self.inputs
        if self.p == 1.0:
            return (g,)
        return (g * self.p * a ** (self.p - 1.0),)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g * Exp.apply(a),)


class Log(Function):
    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, g):
        (a,) = self.inputs
        return (g / a,)


class ClampMin(Function):
    """max(x, lo); gradient passes only where x > lo."""

    lo: float

    def forward(self, a):
        return np.maximum(a, self.lo)

    def backward(self, g):
        (a,) = self.inputs
        return (g * Tensor((a.data > self.lo).astype(DTYPE)),)


class LeakyReLU(Function):
    """max(x, slope*x); ``slope`` may be an array broadcast against x."""

    slope: float | np.ndarray

    def forward(self, a):
        slope = np.asarray(self.slope, dtype=DTYPE)
        if slope.min(initial=0.0) >= 0 and slope.max(initial=0.0) <= 1:
            return np.maximum(a, a * slope)
        return np.where(a > 0, a, a * slope)

    def backward(self, g):
        (a,) = self.inputs
        slope = np.asarray(self.slope, dtype=DTYPE)
        mask = (a.data > 0) * (DTYPE(1.0) - slope) + slope
        return (g * Tensor(mask.astype(DTYPE, copy=False)),)


class Sum(Function):
    axis: tuple[int, ...] | None
    keepdims: bool

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.inputs
        if not self.keepdims:
            axes = range(a.ndim) if self.axis is None else self.axis
            kept = list(a.shape)
            for ax in axes:
                kept[ax] = 1
            g = Reshape.apply(g, shape=tuple(kept))
        return (BroadcastTo.apply(g, shape=a.shape),)


class BroadcastTo(Function):
    shape: tuple[int, ...]

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g):
        (a,) = self.inputs
        return (unbroadcast(g, a.shape),)


class Reshape(Function):
    shape: tuple[int, ...]

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

    def backward(self, g):
        (a,) = self.inputs
        return (Reshape.apply(g, shape=a.shape),)


class Transpose(Function):
    axes: tuple[int, ...]

    def forward(self, a):
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, g):
        return (Transpose.apply(g, axes=tuple(np.argsort(self.axes))),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = MatMul.apply(g, Transpose.apply(b, axes=(1, 0))) if a.requires_grad else None
        gb = MatMul.apply(Transpose.apply(a, axes=(1, 0)), g) if b.requires_grad else None
        return ga, gb


class GetItem(Function):
    index: object

    def forward(self, a):
        return np.array(a[self.index], dtype=DTYPE)

    def backward(self, g):
        (a,) = self.inputs
        return (ScatterAdd.apply(g, index=self.index, shape=a.shape),)


class ScatterAdd(Function):
    """Adjoint of GetItem: zeros of ``shape`` with ``g`` added at ``index``."""

    index: object
    shape: tuple[int, ...]

    def forward(self, g):
        out = np.zeros(self.shape, dtype=DTYPE)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return out

    def backward(self, gg):
        return (GetItem.apply(gg, index=self.index),)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


class Concat(Function):
    axis: int

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        grads = []
        start = 0
        for t in self.inputs:
            n = t.shape[self.axis]
            idx = [slice(None)] * g.ndim
            idx[self.axis] = slice(start, start + n)
            grads.append(GetItem.apply(g, index=tuple(idx)) if t.requires_grad else None)
            start += n
        return grads


class Einsum(Function):
    """Two-operand einsum. Each operand index must appear in the other operand
    or in the output, which keeps both adjoints expressible as einsums."""

    spec: str

    def forward(self, a, b):
        return np.einsum(self.spec, a, b, optimize=True)

    def backward(self, g):
        a, b = self.inputs
        ins, out = self.spec.split("->")
        sa, sb = ins.split(",")
        ga = Einsum.apply(g, b, spec=f"{out},{sb}->{sa}") if a.requires_grad else None
        gb = Einsum.apply(a, g, spec=f"{sa},{out}->{sb}") if b.requires_grad else None
        return ga, gb


def einsum(spec: str, a, b) -> Tensor:
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        if len(set(mine)) != len(mine) or any(c not in other and c not in out for c in mine):
            raise DimensionError(f"einsum spec {spec!r} is outside the supported form")
    return Einsum.apply(a, b, spec=f"{sa},{sb}->{out}")


class Solve(Function):
    """X = A^{-1} B for a square A."""

    def forward(self, a, b):
        if a.ndim != 2 or a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise DimensionError(f"solve shapes {a.shape} and {b.shape} do not agree")
        return np.linalg.solve(a, b)

    def backward(self, g):
        a, b = self.inputs
        at = Transpose.apply(a, axes=(1, 0))
        gb = Solve.apply(at, g)
        ga = None
        if a.requires_grad:
            x = Solve.apply(a, b)
            ga = -MatMul.apply(gb, Transpose.apply(x, axes=(1, 0)))
        return ga, gb


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def solve(a: Tensor, b: Tensor) -> Tensor:
    return Solve.apply(a, b)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)
