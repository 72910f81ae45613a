"""Dense reverse-mode automatic differentiation on NumPy arrays.

Graphs are recorded define-by-run: operations executed inside an active
:class:`Tape` append a node holding the inputs and a vector-Jacobian product
closure. Outside a tape, operations evaluate eagerly and record nothing, which
is the fast path used for inference.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> grad(y, tape, [x])[0]
    array([6.])
"""

from __future__ import annotations

import hashlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Float64 array with an optional handle into the tape that produced it."""

    __slots__ = ("data", "requires_grad", "name", "node_id", "_tape_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        # a finite sum proves every entry finite; only scan elementwise when it is not
        if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} contains NaN or Inf".replace("  ", " "))
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        # tape serial rather than a reference: tape -> node -> tensor -> tape would be a cycle
        self._tape_id: int | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all real work lives in the functions below
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so a reverse sweep is a valid
    reverse topological order. A tape may be entered once; rebuild it for each
    forward pass.
    """

    _serials = itertools.count()

    def __init__(self):
        self.nodes: list[Node] = []
        self.serial = next(Tape._serials)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t._tape_id == tape.serial and t.node_id is not None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out.node_id = len(tape.nodes)
        out._tape_id = tape.serial
        tape.nodes.append(Node(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def squared_error(pred: Tensor, target) -> Tensor:
    """Elementwise ``(pred - target)**2``."""
    return square(sub(pred, target))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split branches keep exp() from overflowing for large |x|
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def clamp(x: Tensor, lo, hi) -> Tensor:
    """Elementwise ``min(max(x, lo), hi)``; gradient is zero on and beyond the bounds.

    Bounds may be scalars or arrays broadcastable against ``x``.
    """
    if not np.all(np.asarray(lo) < np.asarray(hi)):
        raise ConfigError(f"clamp needs lo < hi, got lo={lo}, hi={hi}")
    xd = x.data
    mask = (xd > lo) & (xd < hi)
    return _record("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    tape = _active_tape()
    need_a = tape is not None and _tracked(a, tape)
    need_b = tape is not None and _tracked(b, tape)

    def vjp(g):
        ga = gb = None
        if need_a:
            if bd.ndim == 2 and ad.ndim > 2:
                ga = g @ bd.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold the batch axes into one product instead of summing per-batch outer products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), vjp)


# ---------------------------------------------------------------- reductions / structure


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _record("concat", data, tensors, vjp)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def slice_(x: Tensor, index) -> Tensor:
    src = x.shape
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(src)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("slice", np.array(x.data[index]), (x,), vjp)


# ---------------------------------------------------------------- backward


def _sweep(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape_id != tape.serial or loss.node_id is None:
        raise ContractError("loss was not produced on the given tape")
    # fresh buffers per call: repeated sweeps never accumulate into each other
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not _tracked(t, tape):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return grads


def grad(loss: Tensor, tape: Tape, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt`` (zeros if unreachable)."""
    grads = _sweep(loss, tape)
    return [grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


def backward(loss: Tensor, tape: Tape, params: "ParamSet | Mapping[str, Tensor]") -> dict[str, np.ndarray]:
    """Gradient map keyed by parameter name; unreachable parameters get zeros."""
    tensors = params.tensors if isinstance(params, ParamSet) else dict(params)
    grads = _sweep(loss, tape)
    return {name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
            for name, t in tensors.items()}


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Named parameter tensors with a frozen flag and a content fingerprint."""

    def __init__(self, arrays: Mapping[str, np.ndarray], frozen: bool = False):
        self.tensors: dict[str, Tensor] = {
            name: Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)
            for name, arr in arrays.items()
        }
        self.frozen = False
        if frozen:
            self.freeze()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @property
    def num_values(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def freeze(self) -> "ParamSet":
        self.frozen = True
        for t in self.tensors.values():
            t.data.flags.writeable = False
            # frozen leaves drop out of the graph: no gradient ever reaches them
            t.requires_grad = False
        return self

    def unfreeze(self) -> "ParamSet":
        self.frozen = False
        for t in self.tensors.values():
            t.data = t.data.copy()
            t.requires_grad = True
        return self

    def copy(self, frozen: bool | None = None) -> "ParamSet":
        return ParamSet({k: t.data.copy() for k, t in self.tensors.items()},
                        frozen=self.frozen if frozen is None else frozen)

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        if self.frozen:
            raise ContractError("cannot assign into a frozen parameter set")
        for name, arr in arrays.items():
            t = self.tensors[name]
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=np.float64)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = self.tensors[name].data
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- finite differences


def finite_difference(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. the data of ``x`` (mutated in place, restored)."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of ``fn`` against central differences for each input.

    Returns the relative error per input, keyed by tensor name (or position).
    """
    inputs = list(inputs)
    with Tape() as tape:
        loss = fn()
    analytic = grad(loss, tape, inputs)
    errors = {}
    for i, (x, a) in enumerate(zip(inputs, analytic)):
        errors[x.name or str(i)] = relative_error(a, finite_difference(fn, x, h))
    return errors
