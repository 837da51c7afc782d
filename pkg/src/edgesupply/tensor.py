"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every primitive checks its input shapes and rejects non-finite inputs. When a
:class:`Tape` is active and at least one input is tracked (a trainable
parameter or the output of a recorded node), the primitive appends a node to
the tape holding the closure that maps the output gradient to input
gradients. ``backward`` walks the tape in reverse recording order, which is a
topological order by construction.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return getitem(self, key)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; only one tape records at a time.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.params = {}

    def _record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad:
                key = t.name if t.name is not None else f"@{id(t)}"
                prev = self.params.get(key)
                if prev is not None and prev is not t:
                    raise ValueError(f"two distinct parameters share the name {key!r}")
                self.params[key] = t
        out._tracked = True
        self.nodes.append(_Node(op, inputs, out, vjp))


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE
    if tape is not None and any(t._tracked for t in inputs):
        tape._record(op, inputs, out, vjp)
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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, n) -> (..., n)``; the right operand must be 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", a, b)
    ad, bd = a.data, b.data
    k, n = bd.shape

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, vjp)


# -- elementwise unary -------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("sigmoid", x)
    y = _sigmoid_np(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("tanh", x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("relu", x)
    on = x.data > 0
    return _emit("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))``, evaluated without overflow."""
    x = _as_tensor(x)
    _check_finite("softplus", x)
    xd = x.data
    y = np.logaddexp(0.0, xd)
    return _emit("softplus", (x,), y, lambda g: (g * _sigmoid_np(xd),))


def log(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("log", x)
    if (x.data <= 0).any():
        raise ValueError("log: input must be strictly positive")
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient is zero where the clamp is active."""
    x = _as_tensor(x)
    _check_finite("clip", x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def softmax(x, axis: int = -1) -> Tensor:
    """Row softmax along ``axis`` (max-shifted)."""
    x = _as_tensor(x)
    _check_finite("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, vjp)


# -- reductions and structure ------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    _check_finite("sum", x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(out), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axis`` (all axes when ``None``)."""
    x = _as_tensor(x)
    _check_finite("mean", x)
    shape = x.shape
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean: empty reduction over axis {axis} of shape {shape}")
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", (x,), np.asarray(out), vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    _check_finite("concat", *ts)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=ax),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def getitem(x, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    x = _as_tensor(x)
    shape = x.shape
    try:
        out = x.data[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _emit("slice", (x,), np.array(out, dtype=np.float64), vjp)


def take(table, index) -> Tensor:
    """Row lookup ``table[index]`` for an integer array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take: index out of range for table {table.shape}")
    rows, d = table.shape

    def vjp(g):
        full = np.zeros((rows, d))
        np.add.at(full, idx.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _emit("take", (table,), table.data[idx], vjp)


# -- losses ------------------------------------------------------------------

def bce_loss(pred, labels) -> Tensor:
    """Mean binary cross-entropy; predictions clamped into [1e-7, 1-1e-7]."""
    pred = _as_tensor(pred)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"bce_loss: incompatible shapes {pred.shape} and {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce_loss: labels must be 0 or 1")
    p = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    terms = add(mul(y, log(p)), mul(1.0 - y, log(sub(1.0, p))))
    return mul(mean(terms), -1.0)


def mse_loss(pred, labels) -> Tensor:
    pred = _as_tensor(pred)
    y = _as_tensor(labels)
    if pred.shape != y.shape:
        raise ShapeError(f"mse_loss: incompatible shapes {pred.shape} and {y.shape}")
    diff = sub(pred, y)
    return mean(mul(diff, diff))


# -- backward ----------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every trainable parameter on the tape.

    The tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t._tracked:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    tape.reset()
    return out


def gradient_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                   max_coords: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6) -> float:
    """Largest relative error between ``backward`` and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords``
    each parameter is probed at that many random coordinates instead of all.
    """
    with Tape() as tape:
        grads = backward(tape, loss_fn())
    worst = 0.0
    for name, p in params.items():
        g = grads.get(name, np.zeros_like(p.data)).reshape(-1)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), floor)
            worst = max(worst, err)
    return worst


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "concat": concat,
    "slice": getitem, "sigmoid": sigmoid, "tanh": tanh, "relu": relu,
    "softplus": softplus, "softmax": softmax, "mean": mean, "sum": sum,
    "log": log, "clip": clip, "reshape": reshape, "take": take,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)
