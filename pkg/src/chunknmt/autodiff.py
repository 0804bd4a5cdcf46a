"""Small reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` walks that record in reverse and accumulates gradients into
leaf tensors. Outside a tape, operations run as plain numpy (inference mode).
"""
from __future__ import annotations

import threading

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; nodes are appended as operations run, so every
    node's parents precede it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: "Tensor") -> None:
        node._tape = self
        node._index = len(self.nodes)
        self.nodes.append(node)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._tape = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out._index = -1
    out._parents = ()
    out._backward = None
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; gradients are routed, not mixed."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    _check_broadcast(a, b, "where")
    out = np.where(cond, a.data, b.data)
    zero = np.zeros((), dtype=out.dtype)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, zero), a.shape),
                                          _unbroadcast(np.where(cond, zero, g), b.shape)))


def maxout(a, pieces: int = 2) -> Tensor:
    """Max over consecutive groups of ``pieces`` units along the last axis."""
    a = as_tensor(a)
    n = a.shape[-1]
    if n % pieces:
        raise ValueError(f"maxout: last dim {n} not divisible by {pieces}")
    grouped = a.data.reshape(a.shape[:-1] + (n // pieces, pieces))
    arg = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(grouped)
        np.put_along_axis(ga, arg[..., None], g[..., None], axis=-1)
        return (ga.reshape(a.shape),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics, including 1-D operands and batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        g = g.reshape(np.broadcast_shapes(A.shape[:-2], B.shape[:-2]) + (A.shape[-2], B.shape[-1]))
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def matvec(w, x) -> Tensor:
    return matmul(w, x)


def dot(a, b) -> Tensor:
    return sum(mul(a, b))


# ---------------------------------------------------------------- shape ops


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " vs ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concat: shape mismatch {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " vs ".join(str(t.shape) for t in tensors)
        raise ValueError(f"stack: shape mismatch {shapes}") from None
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def getitem(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[..., start:stop]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _make(out, (a,), backward)


def scatter_rows(a, rows, n: int) -> Tensor:
    """Place the rows of ``a`` at positions ``rows`` of an ``n``-row zero tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:], dtype=a.data.dtype)
    out[rows] = a.data
    return _make(out, (a,), lambda g: (g[rows],))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    return getitem(weight, ids)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- softmax family


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite logits")


def _masked_log_softmax(x: np.ndarray, mask) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    Positions where ``mask`` is False get probability exactly zero.
    """
    a = as_tensor(a)
    _check_finite(a.data)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    y = np.exp(_masked_log_softmax(a.data, mask))

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax(a, mask=None) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    ls = _masked_log_softmax(a.data, mask)
    p = np.exp(ls)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(ls, (a,), backward)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` in fused form."""
    logits = as_tensor(logits)
    _check_finite(logits.data)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross-entropy: shape mismatch {logits.shape} vs {targets.shape}")
    ls = _masked_log_softmax(logits.data, None)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.exp(ls)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g[..., None],)

    return _make(-picked, (logits,), backward)


def cross_entropy(probs, targets) -> Tensor:
    """``-log probs[target]`` for already-normalized probabilities."""
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.shape[:-1] != targets.shape:
        raise ValueError(f"cross-entropy: shape mismatch {probs.shape} vs {targets.shape}")
    idx = int(targets) if targets.ndim == 0 else tuple(np.indices(targets.shape)) + (targets,)
    picked = getitem(probs, idx)
    return neg(log(picked))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``grad``.

    Gradients add onto whatever is already stored; zero them between steps.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = loss.grad + seed
        return
    tape = loss._tape
    if tape is None or tape.nodes[loss._index] is not loss:
        raise RuntimeError("loss was not recorded on a tape")
    pending = {id(loss): seed}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def grad_check(f, point, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of Tensors to a scalar Tensor; ``point`` is a list of
    arrays (or a single array). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else \
        [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = f(leaves[0] if single else leaves)
        backward(out)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = leaves[k].grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval(f, arrays, single)
            flat[i] = orig - h
            fm = _eval(f, arrays, single)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _eval(f, arrays, single) -> float:
    ts = [Tensor(a) for a in arrays]
    return float(f(ts[0] if single else ts).data)
