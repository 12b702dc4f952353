"""Dense tensors with reverse-mode automatic differentiation.

Values are 64-bit floats in C-contiguous (row-major) storage, rank <= 3
(batch x time x feature covers every computation in this package). Ops
executed while a :class:`Tape` is active record backward closures; the tape
walks the record in reverse to accumulate gradients. Tensors without a tape
link are immutable values and can be shared freely across threads; a tape
itself is single-threaded.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NonFinite",
    "NotScalar",
    "set_checked",
    "is_checked",
    "tensor",
    "stop_gradient",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "concat",
    "slice_",
    "reshape",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "sum_",
    "mean",
    "abs_",
    "square",
    "sqrt",
    "log",
    "exp",
]

_MAX_RANK = 3

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")
        self.op = op
        self.shapes = shapes


class NonFinite(ValueError):
    """A NaN or infinity was produced while checked mode is on."""


class NotScalar(ValueError):
    """backward() requires a loss with exactly one element."""


_checked = True


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf validation of op results. Returns the previous setting.

    On by default; training loops switch it off for speed.
    """
    global _checked
    previous = _checked
    _checked = bool(flag)
    return previous


def is_checked() -> bool:
    return _checked


_tls = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_tls, "tape", None)


class Tensor:
    """Immutable dense value, optionally linked to a tape node."""

    __slots__ = ("values", "node_id")

    def __init__(self, values: ArrayLike, node_id: Optional[int] = None):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim > _MAX_RANK:
            raise ShapeMismatch("tensor", arr.shape)
        if _checked and not np.all(np.isfinite(arr)):
            raise NonFinite(f"non-finite entries in tensor of shape {arr.shape}")
        self.values = arr
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.values.reshape(-1)

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.values.shape}{tag})"


def _wrap(values: np.ndarray, node_id: Optional[int] = None) -> Tensor:
    """Internal constructor skipping re-validation of freshly computed arrays."""
    t = Tensor.__new__(Tensor)
    t.values = values
    t.node_id = node_id
    return t


def tensor(values: ArrayLike) -> Tensor:
    """Build a leaf tensor (validated in checked mode)."""
    if isinstance(values, Tensor):
        return values
    return Tensor(values)


def _coerce(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from any tape."""
    return _wrap(x.values, None)


class Tape:
    """Append-only record of primitive ops for reverse-mode differentiation.

    Node references are strictly backward-pointing: every parent id is
    smaller than its child's id, which makes the record acyclic by
    construction. Gradients from repeated ``backward`` calls accumulate
    until the tape is discarded.
    """

    __slots__ = ("_parents", "_bwd", "_shapes", "_grads")

    def __init__(self):
        self._parents: list = []
        self._bwd: list = []
        self._shapes: list = []
        self._grads: dict = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None

    def __len__(self) -> int:
        return len(self._parents)

    def _record(self, parents: tuple, bwd, shape: tuple) -> int:
        nid = len(self._parents)
        self._parents.append(parents)
        self._bwd.append(bwd)
        self._shapes.append(shape)
        return nid

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf so gradients w.r.t. it are collected."""
        if t.node_id is not None:
            return t
        nid = self._record((), None, t.values.shape)
        return _wrap(t.values, nid)

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(node) to every reachable node.

        Returns the accumulated gradient map {node_id: array}. Calling
        again without discarding the tape adds onto previous gradients.
        """
        if loss.node_id is None:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.values.size != 1:
            raise NotScalar(f"loss has shape {loss.values.shape}, expected a single element")
        local: dict = {loss.node_id: np.ones(self._shapes[loss.node_id])}
        parents = self._parents
        bwd = self._bwd
        for nid in range(loss.node_id, -1, -1):
            g = local.get(nid)
            if g is None:
                continue
            fn = bwd[nid]
            if fn is None:
                continue
            for pid, pg in zip(parents[nid], fn(g)):
                if pid is None or pg is None:
                    continue
                acc = local.get(pid)
                if acc is None:
                    local[pid] = pg if pg.flags.owndata else pg.copy()
                else:
                    acc += pg
        grads = self._grads
        for nid, g in local.items():
            acc = grads.get(nid)
            if acc is None:
                grads[nid] = g.copy()
            else:
                acc += g
        return grads

    def gradient(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient for a tensor on this tape (zeros if unreached)."""
        if t.node_id is None:
            raise ValueError("tensor is not recorded on this tape")
        g = self._grads.get(t.node_id)
        if g is None:
            return np.zeros(self._shapes[t.node_id])
        return g


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if _checked and not np.all(np.isfinite(arr)):
        raise NonFinite(f"{op} produced non-finite values")
    return arr


def _result(arr: np.ndarray, op: str, inputs: tuple, bwd_factory) -> Tensor:
    """Wrap an op result, recording it when a tape is active and relevant."""
    _finite(arr, op)
    tape = _active_tape()
    if tape is None:
        return _wrap(arr)
    parent_ids = tuple(t.node_id for t in inputs)
    if all(pid is None for pid in parent_ids):
        return _wrap(arr)
    return _wrap(arr, tape._record(parent_ids, bwd_factory(), arr.shape))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(op, a.shape, b.shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    _broadcast_check("add", av, bv)
    out = av + bv

    def factory():
        ash, bsh = av.shape, bv.shape

        def bwd(g):
            return _reduce_to(g, ash), _reduce_to(g, bsh)

        return bwd

    return _result(out, "add", (a, b), factory)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    _broadcast_check("sub", av, bv)
    out = av - bv

    def factory():
        ash, bsh = av.shape, bv.shape

        def bwd(g):
            return _reduce_to(g, ash), _reduce_to(-g, bsh)

        return bwd

    return _result(out, "sub", (a, b), factory)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise (Hadamard) product with numpy-style broadcast."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    _broadcast_check("mul", av, bv)
    out = av * bv

    def factory():
        def bwd(g):
            return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

        return bwd

    return _result(out, "mul", (a, b), factory)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    _broadcast_check("div", av, bv)
    out = av / bv

    def factory():
        def bwd(g):
            ga = _reduce_to(g / bv, av.shape)
            gb = _reduce_to(-g * av / (bv * bv), bv.shape)
            return ga, gb

        return bwd

    return _result(out, "div", (a, b), factory)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; ``a`` may be a vector or matrix, ``b`` a matrix."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch("matmul", av.shape, bv.shape)
    out = av @ bv

    def factory():
        if av.ndim == 1:

            def bwd(g):
                return g @ bv.T, np.outer(av, g)

        else:

            def bwd(g):
                return g @ bv.T, av.T @ g

        return bwd

    return _result(out, "matmul", (a, b), factory)


def concat(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.values, b.values
    if av.ndim != bv.ndim:
        raise ShapeMismatch("concat", av.shape, bv.shape)
    ax = axis % av.ndim if av.ndim else 0
    for i, (da, db) in enumerate(zip(av.shape, bv.shape)):
        if i != ax and da != db:
            raise ShapeMismatch("concat", av.shape, bv.shape)
    out = np.concatenate((av, bv), axis=ax)

    def factory():
        split = av.shape[ax]

        def bwd(g):
            ga, gb = np.split(g, [split], axis=ax)
            return ga, gb

        return bwd

    return _result(out, "concat", (a, b), factory)


def slice_(a: ArrayLike, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous sub-range [start, stop) along one axis."""
    a = _coerce(a)
    av = a.values
    ax = axis % av.ndim
    if not (0 <= start <= stop <= av.shape[ax]):
        raise ShapeMismatch("slice", av.shape, (start, stop, ax))
    index = tuple(slice(start, stop) if i == ax else slice(None) for i in range(av.ndim))
    out = np.ascontiguousarray(av[index])

    def factory():
        shape = av.shape

        def bwd(g):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        return bwd

    return _result(out, "slice", (a,), factory)


def reshape(a: ArrayLike, shape: Iterable[int]) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    if len(shape) > _MAX_RANK:
        raise ShapeMismatch("reshape", a.shape, shape)
    try:
        out = a.values.reshape(shape)
    except ValueError as err:
        raise ShapeMismatch("reshape", a.shape, shape) from err

    def factory():
        original = a.values.shape

        def bwd(g):
            return (g.reshape(original),)

        return bwd

    return _result(np.ascontiguousarray(out), "reshape", (a,), factory)


def sigmoid(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = np.empty_like(av)
    np.negative(np.abs(av), out=out)
    np.exp(out, out=out)
    # sign-split form is stable for large |x|
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + out[pos])
    out[~pos] = out[~pos] / (1.0 + out[~pos])

    def factory():
        def bwd(g):
            return (g * out * (1.0 - out),)

        return bwd

    return _result(out, "sigmoid", (a,), factory)


def tanh(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.values)

    def factory():
        def bwd(g):
            return (g * (1.0 - out * out),)

        return bwd

    return _result(out, "tanh", (a,), factory)


def relu(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = np.maximum(av, 0.0)

    def factory():
        def bwd(g):
            return (g * (av > 0.0),)

        return bwd

    return _result(out, "relu", (a,), factory)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _coerce(a)
    av = a.values
    shifted = av - av.max(axis=axis, keepdims=True)
    out = np.exp(shifted)
    out /= out.sum(axis=axis, keepdims=True)

    def factory():
        def bwd(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return ((g - inner) * out,)

        return bwd

    return _result(out, "softmax", (a,), factory)


def sum_(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = av.sum(axis=axis)

    def factory():
        shape = av.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return bwd

    return _result(np.asarray(out), "sum", (a,), factory)


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = av.mean(axis=axis)
    count = av.size if axis is None else av.shape[axis]

    def factory():
        shape = av.shape

        def bwd(g):
            scale = g / count
            if axis is None:
                return (np.broadcast_to(scale, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(scale, axis), shape).copy(),)

        return bwd

    return _result(np.asarray(out), "mean", (a,), factory)


def abs_(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = np.abs(av)

    def factory():
        def bwd(g):
            return (g * np.sign(av),)

        return bwd

    return _result(out, "abs", (a,), factory)


def square(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = av * av

    def factory():
        def bwd(g):
            return (g * 2.0 * av,)

        return bwd

    return _result(out, "square", (a,), factory)


def sqrt(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.values)

    def factory():
        def bwd(g):
            return (g * 0.5 / out,)

        return bwd

    return _result(out, "sqrt", (a,), factory)


def log(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    av = a.values
    out = np.log(av)

    def factory():
        def bwd(g):
            return (g / av,)

        return bwd

    return _result(out, "log", (a,), factory)


def exp(a: ArrayLike) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.values)

    def factory():
        def bwd(g):
            return (g * out,)

        return bwd

    return _result(out, "exp", (a,), factory)
