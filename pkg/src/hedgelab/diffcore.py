"""Dense float64 tensors with tape-based reverse-mode differentiation.

Kernel table (shapes follow numpy broadcasting unless noted)::

    kind        inputs                       output
    ----------  ---------------------------  -----------------------------
    matmul      (..., m, k), (..., k, n)     (..., m, n)
    add/sub     broadcastable pair           broadcast shape
    mul/div     broadcastable pair           broadcast shape
    minimum     broadcastable pair           broadcast shape
    exp, ln, tanh, sigmoid, softplus,
    square, abs, sqrt                        elementwise, same shape
    clip        x, attrs lo/hi               same shape
    softmax     x, attr axis                 same shape
    concat      x1..xn, attr axis            extents summed along axis
    slice       x, attr index                numpy indexing result
    sum/mean    x, attrs axis/keepdims       reduced shape
    reshape     x, attr shape                given shape
    transpose   x, attr axes                 permuted shape
    gru_cell    x (B, I), h (B, H),          (B, H)
                w_x (I, 3H), w_h (H, 3H),
                b (3H,)

Gate layout inside ``gru_cell`` columns is [update | reset | candidate].
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ParamStore",
    "ShapeError",
    "NonFiniteError",
    "apply",
    "backward",
    "adam_step",
    "param",
    "no_grad_value",
]

LN_FLOOR = 1e-300
CHECKPOINT_MAGIC = b"HLCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Immutable float64 array, optionally attached to a node of a Graph."""

    __slots__ = ("data", "node", "graph")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, *, _node: int | None = None, _graph: "Graph | None" = None, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite entries")
        self.data = arr
        self.node = _node
        self.graph = _graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # arithmetic sugar, every operator routes through apply()
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("kind", "inputs", "backward_fn", "name")

    def __init__(self, kind, inputs, backward_fn, name=None):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


_ACTIVE: list["Graph"] = []


class Graph:
    """Append-only tape. Use as a context manager to record operations.

    Only operations with at least one differentiable input are recorded, so
    code run without an active graph (or on constants) costs nothing extra.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def _append(self, node: _Node, data: np.ndarray) -> Tensor:
        self.nodes.append(node)
        return Tensor(data, _node=len(self.nodes) - 1, _graph=self, check=False)

    def leaf(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            return self.params[name]
        t = self._append(_Node("param", (), None, name), np.asarray(value, dtype=np.float64))
        self.params[name] = t
        return t


def _active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def param(store: "ParamStore", name: str) -> Tensor:
    """Fetch a parameter, registering it on the active graph if there is one."""
    g = _active_graph()
    value = store[name]
    if g is None:
        return Tensor(value, check=False)
    return g.leaf(name, value)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# Each kernel: forward(*arrays, **attrs) -> (out, backward(g) -> tuple of input grads)
Kernel = Callable[..., tuple[np.ndarray, Callable[[np.ndarray], Sequence[np.ndarray | None]]]]


def _k_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, bw


def _k_add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _k_sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _k_mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _k_div(a, b):
    _check_broadcast("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _k_minimum(a, b):
    _check_broadcast("minimum", a, b)
    out = np.minimum(a, b)
    take_a = a <= b  # ties route to the first operand

    def bw(g):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return out, bw


def _k_exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


def _k_ln(x):
    safe = np.maximum(x, LN_FLOOR)
    return np.log(safe), lambda g: (g / safe,)


def _k_tanh(x):
    out = np.tanh(x)
    return out, lambda g: (g * (1.0 - out * out),)


def _k_sigmoid(x):
    out = _sigmoid(x)
    return out, lambda g: (g * out * (1.0 - out),)


def _k_softplus(x):
    return _softplus(x), lambda g: (g * _sigmoid(x),)


def _k_square(x):
    return x * x, lambda g: (2.0 * g * x,)


def _k_abs(x):
    return np.abs(x), lambda g: (g * np.sign(x),)


def _k_sqrt(x):
    out = np.sqrt(x)
    return out, lambda g: (g * 0.5 / out,)


def _k_clip(x, *, lo, hi):
    out = np.clip(x, lo, hi)
    inside = (x >= lo) & (x <= hi)
    return out, lambda g: (np.where(inside, g, 0.0),)


def _k_softmax(x, *, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, bw


def _k_concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, bw


def _k_slice(x, *, index):
    out = np.array(x[index])

    def bw(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return out, bw


def _k_sum(x, *, axis=None, keepdims=False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return out, bw


def _k_mean(x, *, axis=None, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1) if x.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return out, bw


def _k_reshape(x, *, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _k_transpose(x, *, axes=None):
    out = np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)
    return out, lambda g: (np.transpose(g, inv),)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def _k_gru_cell(x, h, w_x, w_h, b):
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: x {x.shape} and h {h.shape} must be (B, I) and (B, H)")
    hid = h.shape[1]
    if w_x.shape != (x.shape[1], 3 * hid) or w_h.shape != (hid, 3 * hid) or b.shape != (3 * hid,):
        raise ShapeError(
            f"gru_cell: expected w_x {(x.shape[1], 3 * hid)}, w_h {(hid, 3 * hid)}, b {(3 * hid,)}; "
            f"got {w_x.shape}, {w_h.shape}, {b.shape}"
        )
    ax = x @ w_x + b
    ah = h @ w_h
    z = _sigmoid(ax[:, :hid] + ah[:, :hid])
    r = _sigmoid(ax[:, hid:2 * hid] + ah[:, hid:2 * hid])
    u = ah[:, 2 * hid:]
    n = np.tanh(ax[:, 2 * hid:] + r * u)
    # tanh rounds to exactly +-1 past |a| ~ 19; keep the state strictly inside (-1, 1)
    out = np.clip((1.0 - z) * n + z * h, -_BELOW_ONE, _BELOW_ONE)

    def bw(g):
        dn = g * (1.0 - z)
        dz = g * (h - n)
        da_n = dn * (1.0 - n * n)
        da_z = dz * z * (1.0 - z)
        da_r = da_n * u * r * (1.0 - r)
        d_ax = np.concatenate([da_z, da_r, da_n], axis=1)
        d_ah = np.concatenate([da_z, da_r, da_n * r], axis=1)
        dx = d_ax @ w_x.T
        dh = g * z + d_ah @ w_h.T
        return dx, dh, x.T @ d_ax, h.T @ d_ah, d_ax.sum(axis=0)

    return out, bw


KERNELS: dict[str, Kernel] = {
    "matmul": _k_matmul,
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "div": _k_div,
    "minimum": _k_minimum,
    "exp": _k_exp,
    "ln": _k_ln,
    "tanh": _k_tanh,
    "sigmoid": _k_sigmoid,
    "softplus": _k_softplus,
    "square": _k_square,
    "abs": _k_abs,
    "sqrt": _k_sqrt,
    "clip": _k_clip,
    "softmax": _k_softmax,
    "concat": _k_concat,
    "slice": _k_slice,
    "sum": _k_sum,
    "mean": _k_mean,
    "reshape": _k_reshape,
    "transpose": _k_transpose,
    "gru_cell": _k_gru_cell,
}


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Run kernel ``kind`` on ``inputs`` and record it on the active graph."""
    try:
        kernel = KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [_as_tensor(x) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, bw = kernel(*(t.data for t in tensors), **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {kind!r} produced non-finite output")
    graph = _active_graph()
    if graph is None or not any(t.graph is graph for t in tensors):
        return Tensor(out, check=False)
    node = _Node(kind, tuple(t.node if t.graph is graph else None for t in tensors), bw)
    return graph._append(node, out)


def backward(loss: Tensor, graph: Graph, store: "ParamStore | None" = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every parameter leaf.

    When ``store`` is given, parameters of the store that the loss never
    touched are returned with zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.graph is not graph:
        raise ValueError("loss was not recorded on this graph")
    if graph.consumed:
        raise RuntimeError("graph already consumed by a backward pass")
    graph.consumed = True

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for idx in range(loss.node, -1, -1):
        g = grads[idx]
        node = graph.nodes[idx]
        if g is None or node.backward_fn is None:
            continue
        input_grads = node.backward_fn(g)
        for src, ig in zip(node.inputs, input_grads):
            if src is None or ig is None:
                continue
            prev = grads[src]
            grads[src] = ig if prev is None else prev + ig
        if node.kind != "param":
            grads[idx] = None

    out: dict[str, np.ndarray] = {}
    for name, t in graph.params.items():
        g = grads[t.node]
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    if store is not None:
        for name in store.names():
            out.setdefault(name, np.zeros_like(store[name]))
    return out


class ParamStore:
    """Named parameters plus Adam moments and a step counter."""

    def __init__(self) -> None:
        self._params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} has non-finite entries")
        self._params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._params[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {self._params[name].shape} is immutable, got {arr.shape}")
        self._params[name] = arr.copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._params.items()

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, value in self._params.items():
            new._params[name] = value.copy()
            new.m[name] = self.m[name].copy()
            new.v[name] = self.v[name].copy()
        new.step = self.step
        return new

    def reset_optimizer(self) -> None:
        for name, value in self._params.items():
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
        self.step = 0

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names() or self.step != other.step:
            return False
        return all(
            np.array_equal(self[n], other[n]) and np.array_equal(self.m[n], other.m[n]) and np.array_equal(self.v[n], other.v[n])
            for n in self.names()
        )

    # checkpoint container ------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write a checkpoint.

        Layout (little-endian): magic ``HLCK``, u16 version, u32 entry count,
        then per entry u16 name length, utf-8 name, u8 ndim, ndim x u64
        extents, float64 payload. Parameters come first in insertion order,
        followed by ``adam.m/<name>``, ``adam.v/<name>`` and ``adam.step``.
        """
        entries: list[tuple[str, np.ndarray]] = list(self._params.items())
        entries += [(f"adam.m/{n}", self.m[n]) for n in self._params]
        entries += [(f"adam.v/{n}", self.v[n]) for n in self._params]
        entries.append(("adam.step", np.array(float(self.step))))
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(entries)))
            for name, arr in entries:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        blob = Path(path).read_bytes()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a hedgelab checkpoint")
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        entries: list[tuple[str, np.ndarray]] = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
            entries.append((name, arr))
        store = cls()
        for name, arr in entries:
            if name.startswith("adam."):
                continue
            store.add(name, arr)
        for name, arr in entries:
            if name.startswith("adam.m/"):
                store.m[name[7:]] = arr.copy()
            elif name.startswith("adam.v/"):
                store.v[name[7:]] = arr.copy()
            elif name == "adam.step":
                store.step = int(arr)
        return store


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    max_grad_norm: float | None = None,
) -> ParamStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    names = set(store.names())
    missing, extra = names - set(grads), set(grads) - names
    if missing or extra:
        raise KeyError(f"gradient keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    scale = 1.0
    if max_grad_norm is not None:
        total = np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in store.names()))
        if total > max_grad_norm:
            scale = max_grad_norm / (total + 1e-12)
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name in store.names():
        g = grads[name] * scale
        store.m[name] = b1 * store.m[name] + (1.0 - b1) * g
        store.v[name] = b2 * store.v[name] + (1.0 - b2) * g * g
        update = lr * (store.m[name] / c1) / (np.sqrt(store.v[name] / c2) + eps)
        store._params[name] = store._params[name] - update
    return store


# functional shorthands ------------------------------------------------------
def matmul(a, b):
    return apply("matmul", a, b)


def exp(x):
    return apply("exp", x)


def ln(x):
    return apply("ln", x)


def tanh(x):
    return apply("tanh", x)


def sigmoid(x):
    return apply("sigmoid", x)


def softplus(x):
    return apply("softplus", x)


def square(x):
    return apply("square", x)


def absolute(x):
    return apply("abs", x)


def sqrt(x):
    return apply("sqrt", x)


def minimum(a, b):
    return apply("minimum", a, b)


def clip(x, lo: float, hi: float):
    return apply("clip", x, lo=lo, hi=hi)


def softmax(x, axis: int = -1):
    return apply("softmax", x, axis=axis)


def concat(xs, axis: int = 0):
    return apply("concat", *xs, axis=axis)


def gru_cell(x, h, w_x, w_h, b):
    return apply("gru_cell", x, h, w_x, w_h, b)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize over the last axis; composed from primitive kernels."""
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = square(centred).mean(axis=-1, keepdims=True)
    return centred / sqrt(var + eps) * gain + bias
