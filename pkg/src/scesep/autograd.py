"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a node holding its inputs and a backward
rule. ``backward(loss)`` collects the nodes reachable from ``loss`` into a
:class:`Tape` ordered by recording time and replays it in reverse.

Storage is float32 by default. Reductions and matmul accumulate in float64.
:func:`precision` switches the default to float64, which the gradient checks
use as their reference path.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


@contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    prev = _get("dtype", np.float32)
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable recording, e.g. for inference or finite-difference probes."""
    prev = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def debug_checks(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    prev = _get("debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def default_dtype():
    return _get("dtype", np.float32)


def _contiguous(data, dtype) -> np.ndarray:
    # np.ascontiguousarray would turn 0-d results into shape (1,)
    arr = np.asarray(data, dtype=dtype)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Node:
    __slots__ = ("seq", "name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.name}, seq={self.seq})"


class Tensor:
    """N-dimensional row-major array that can take part in differentiation.

    Only ``grad`` is meant to change after construction; optimizers update
    leaf ``data`` in place between forward passes.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _contiguous(data, dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record the op if any input needs grad."""
    out = Tensor.__new__(Tensor)
    dtype = _result_dtype(*inputs) if inputs else default_dtype()
    out.data = _contiguous(data, dtype)
    out.grad = None
    out._node = None
    if _get("debug", False) and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    needs = _get("grad_enabled", True) and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


class _Grads:
    """Gradient buffers keyed by tensor identity for one backward pass."""

    def __init__(self):
        self._buf: dict[int, np.ndarray] = {}
        self._owned: set[int] = set()

    def get(self, t: Tensor):
        return self._buf.get(id(t))

    def add(self, t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        key = id(t)
        g = np.asarray(g)
        if key in self._buf:
            self._buf[key] = self._buf[key] + g
            self._owned.add(key)
        else:
            self._buf[key] = g.astype(t.dtype, copy=False).reshape(t.shape)

    def add_at(self, t: Tensor, index, g: np.ndarray):
        """Accumulate ``g`` into ``t[index]`` without materialising a full-size update."""
        if not t.requires_grad:
            return
        key = id(t)
        buf = self._buf.get(key)
        if buf is None:
            buf = np.zeros(t.shape, dtype=t.dtype)
        elif key not in self._owned:
            # may alias a buffer handed to another tensor
            buf = np.array(buf, dtype=t.dtype)
        self._buf[key] = buf
        self._owned.add(key)
        buf[index] += g


class Tape:
    """Recorded ops reachable from a loss, in the order they were recorded."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, ids = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None and id(t) not in ids:
                    ids.add(id(t))
                    out.append(t)
        return out

    def replay(self, loss: Tensor, seed: np.ndarray) -> None:
        grads = _Grads()
        grads.add(loss, seed)
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            node.backward_fn(g, grads)
        leaves = self.leaves() if loss._node is not None else [loss]
        for leaf in leaves:
            g = grads.get(leaf)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g.astype(leaf.dtype, copy=False)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling it twice without zeroing grads accumulates twice.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    tape.replay(loss, np.ones(loss.shape, dtype=loss.dtype))
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, _unbroadcast(g, b.shape))

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, -_unbroadcast(g, b.shape))

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, grads):
        if a.requires_grad:
            grads.add(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", a.data * b.data, (a, b), bw)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make("negate", -a.data, (a,), lambda g, grads: grads.add(a, -g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g, grads: grads.add(a, g * (1 - y * y)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the matching branch per element
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)
    return _make("sigmoid", y, (a,), lambda g, grads: grads.add(a, g * y * (1 - y)))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g, grads: grads.add(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of a negative value")
    y = np.sqrt(a.data)
    return _make("sqrt", y, (a,), lambda g, grads: grads.add(a, g * 0.5 / y))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x), finite for any finite x."""
    a = as_tensor(a)
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))

    def bw(g, grads):
        grads.add(a, g * _sigmoid_np(-x))

    return _make("log_sigmoid", y, (a,), bw)


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


# ---------------------------------------------------------------------------
# contraction


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]`` with float64 accumulation."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)

    def bw(g, grads):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            grads.add(a, _unbroadcast(g64 @ np.swapaxes(b64, -1, -2), a.shape))
        if b.requires_grad:
            grads.add(b, _unbroadcast(np.swapaxes(a64, -1, -2) @ g64, b.shape))

    return _make("matmul", a64 @ b64, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % max(ndim, 1))
    return tuple(out)


def _check_nonempty(a: Tensor, axes):
    if a.size == 0 or any(a.shape[ax] == 0 for ax in axes if a.ndim):
        raise ValueError(f"reduction over an empty axis of shape {a.shape}")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    y = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)

    def bw(g, grads):
        if not keepdims:
            g = np.expand_dims(g, axes)
        grads.add(a, np.broadcast_to(g, a.shape))

    return _make("sum", y, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    n = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    y = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64)

    def bw(g, grads):
        if not keepdims:
            g = np.expand_dims(g, axes)
        grads.add(a, np.broadcast_to(g / n, a.shape))

    return _make("mean", y, (a,), bw)


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Forward-only maximum; the result never requires grad."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    return Tensor(a.data.max(axis=axes, keepdims=keepdims), dtype=a.dtype)


def argmax(a, axis=None) -> np.ndarray:
    """Forward-only index of the first maximum along ``axis`` (flattened if None)."""
    a = as_tensor(a)
    if axis is not None:
        axes = _norm_axis(axis, a.ndim)
        _check_nonempty(a, axes)
    elif a.size == 0:
        raise ValueError("argmax of an empty tensor")
    return np.argmax(a.data, axis=axis)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known:
            raise ValueError(f"cannot reshape {a.shape} into {shape}")
    elif int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) into {shape}")
    y = a.data.reshape(shape)
    return _make("reshape", y, (a,), lambda g, grads: grads.add(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; with no ``axes`` swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.transpose(a.data, axes)
    return _make("transpose", y, (a,), lambda g, grads: grads.add(a, np.transpose(g, inv)))


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing; the backward scatters into the sliced region only."""
    a = as_tensor(a)
    try:
        y = a.data[index]
    except IndexError as exc:
        raise IndexError(f"index {index!r} out of bounds for shape {a.shape}") from exc
    return _make("slice", y, (a,), lambda g, grads: grads.add_at(a, index, g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, grads):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.add(t, g[tuple(idx)])

    return _make("concat", y, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of an empty list")
    y = np.stack([t.data for t in tensors], axis=axis)

    def bw(g, grads):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                grads.add(t, np.take(g, i, axis=axis))

    return _make("stack", y, tensors, bw)


def gather_rows(table, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer array; backward scatter-adds into the rows."""
    table = as_tensor(table)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    y = table.data[index]

    def bw(g, grads):
        if not table.requires_grad:
            return
        acc = np.zeros(table.shape, dtype=np.float64)
        np.add.at(acc, index, g)
        grads.add(table, acc)

    return _make("gather_rows", y, (table,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
