"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every trainable piece of the model is written in terms of :class:`Tensor`
so that gradients can be checked against central finite differences.

Each operation that touches a tensor requiring gradients appends a node to
the tape. Nodes carry a monotonically increasing sequence number, so
sorting the reachable nodes by that number recovers forward execution
order; :func:`backward` walks them in reverse exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_sequence = itertools.count()
_recording = True


class ShapeError(ValueError):
    pass


class MissingGradientError(KeyError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Dense float64 array that records its producing operation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)
        self.op = "leaf"

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_sequence)
    out.op = op
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}") from None


# elementwise binary ops -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)),
                   "div")


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` for python scalars."""
    a = _lift(a)
    return _record(scale * a.data + shift, (a,), lambda g: (scale * g,), "affine")


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    a = _lift(a)
    keep = a.data >= floor
    return _record(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


# elementwise unary ops -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def huber(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual."""
    r = _lift(residual)
    ar = np.abs(r.data)
    out = np.where(ar <= delta, 0.5 * r.data**2, delta * (ar - 0.5 * delta))
    slope = np.clip(r.data, -delta, delta)
    return _record(out, (r,), lambda g: (g * slope,), "huber")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # max-subtraction keeps exp() in range; the quotient is unchanged
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp, "softmax")


# reductions -------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return affine(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# structural ops ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return _unbroadcast(ga, ad.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), vjp, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    a = _lift(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), vjp, "getitem")


def scatter_rows(rows: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Place ``rows[k]`` at row ``index[k]`` of an ``n``-row zero matrix (rows summed on repeats)."""
    rows = _lift(rows)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n,) + rows.shape[1:])
    np.add.at(out, index, rows.data)
    return _record(out, (rows,), lambda g: (g[index],), "scatter_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    a = _lift(a)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    out = np.where(mask, value, a.data)
    return _record(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),),
                   "masked_fill")


def custom(inputs: Sequence[Tensor], out: np.ndarray, vjp, op: str = "custom") -> Tensor:
    """Record an externally computed result with a user supplied vector-Jacobian product."""
    return _record(np.asarray(out, dtype=np.float64), tuple(_lift(t) for t in inputs), vjp, op)


# backward ------------------------------------------------------------------------

class GradientMap(dict):
    """Gradients keyed by ``id(parameter)``; lookup of an absent parameter is an error."""

    def __init__(self, *args, names: dict[int, str] | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self._names = names or {}

    def of(self, param: Tensor) -> np.ndarray:
        try:
            return self[id(param)]
        except KeyError:
            label = param.name or repr(param)
            raise MissingGradientError(f"{label} is not reachable from the loss") from None


def _topological(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the gradients of this pass keyed by parameter identity. When
    ``params`` is given, only those are reported and any that the loss does
    not depend on are simply absent from the map.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must have one element, got shape {loss.shape}")
    if not loss.requires_grad:
        return GradientMap()
    nodes = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[id(node)] = node
            grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    result = GradientMap()
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[key] = g
    if params is not None:
        wanted = {id(p) for p in params}
        result = GradientMap({k: v for k, v in result.items() if k in wanted})
    return result


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``. With ``coords_per_param`` only that
    many coordinates of each parameter (drawn without replacement from a
    generator seeded by ``seed``) are perturbed; otherwise all of them.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-7, 1e-4], got {step}")
    if analytic is None:
        for p in params:
            p.zero_grad()
        gmap = backward(f(), params)
        analytic = [gmap.get(id(p), np.zeros_like(p.data)) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a = np.asarray(a).reshape(-1)
        coords = range(flat.size)
        if coords_per_param is not None and coords_per_param < flat.size:
            coords = np.sort(rng.choice(flat.size, size=coords_per_param, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                label = p.name or "parameter"
                raise FloatingPointError(f"non-finite loss perturbing {label}[{i}]")
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(a[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(a[i] - numeric) / denom)
    return worst
