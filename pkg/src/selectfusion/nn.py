"""Parametrized layers, the recurrent encoders, and the Adam optimizer.

Layers are pure functions of (input, params): each layer object owns its
parameter names and shapes, parameters live in a :class:`ParameterStore`,
and a forward pass receives tape-bound tensors so gradients reach every
parameter through the same record.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "EmptyWindow",
    "MissingGradient",
    "ParameterStore",
    "adam_step",
    "Linear",
    "FeedForwardEncoder",
    "LstmCell",
    "BidirectionalEncoder",
    "TemporalRegressor",
]


class EmptyWindow(ValueError):
    """The recurrent encoder received a window with no samples."""


class MissingGradient(KeyError):
    """adam_step received a gradient map that misses a parameter."""


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Named parameter arrays plus per-parameter Adam state.

    The store is exclusively owned by one training loop; evaluation works
    on a frozen :meth:`clone`.
    """

    def __init__(self):
        self.arrays: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(values, dtype=np.float64)
        self.arrays[name] = arr
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)

    def names(self) -> list:
        return sorted(self.arrays)

    def total_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def bind(self, tape: Optional[Tape]) -> Dict[str, Tensor]:
        """Leaf tensors for a forward pass, watched on `tape` when given."""
        if tape is None:
            return {name: ad.tensor(arr) for name, arr in self.arrays.items()}
        return {name: tape.watch(ad.tensor(arr)) for name, arr in self.arrays.items()}

    def clone(self) -> "ParameterStore":
        other = ParameterStore()
        for name, arr in self.arrays.items():
            other.arrays[name] = arr.copy()
            other.adam_m[name] = self.adam_m[name].copy()
            other.adam_v[name] = self.adam_v[name].copy()
        other.step_count = self.step_count
        return other

    def __len__(self) -> int:
        return len(self.arrays)


def adam_step(
    store: ParameterStore,
    grads: Dict[str, np.ndarray],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterStore:
    """One bias-corrected Adam update, in place. Returns the store."""
    for name in store.names():
        if name not in grads:
            raise MissingGradient(name)
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in store.names():
        g = grads[name]
        if g.shape != store.arrays[name].shape:
            raise MissingGradient(f"{name}: gradient shape {g.shape} != {store.arrays[name].shape}")
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store.arrays[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


class Linear:
    """Affine map x @ w + b."""

    def __init__(self, prefix: str, n_in: int, n_out: int):
        self.prefix = prefix
        self.n_in = n_in
        self.n_out = n_out
        self.w_name = f"{prefix}.w"
        self.b_name = f"{prefix}.b"

    def init_into(
        self,
        store: ParameterStore,
        rng: np.random.Generator,
        bias_init: Optional[np.ndarray] = None,
    ) -> None:
        """Uniform +-1/sqrt(fan_in) init; gate layers may pin the bias instead."""
        store.add(self.w_name, _uniform_init(rng, (self.n_in, self.n_out), self.n_in))
        if bias_init is None:
            store.add(self.b_name, _uniform_init(rng, (self.n_out,), self.n_in))
        else:
            store.add(self.b_name, np.broadcast_to(bias_init, (self.n_out,)).astype(np.float64))

    def apply(self, params: Dict[str, Tensor], x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, params[self.w_name]), params[self.b_name])


class FeedForwardEncoder:
    """ReLU multilayer perceptron mapping a raw modality frame to a feature vector."""

    def __init__(self, prefix: str, n_in: int, hidden: Sequence[int], n_out: int):
        self.prefix = prefix
        self.n_in = n_in
        self.n_out = n_out
        dims = [n_in, *hidden, n_out]
        self.layers = [Linear(f"{prefix}.l{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def init_into(self, store: ParameterStore, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_into(store, rng)

    def apply(self, params: Dict[str, Tensor], x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ad.ShapeMismatch(f"{self.prefix}.apply", x.shape, (self.n_in,))
        out = x
        for layer in self.layers[:-1]:
            out = ad.relu(layer.apply(params, out))
        return self.layers[-1].apply(params, out)


class LstmCell:
    """Single LSTM cell; gate blocks ordered (input, forget, cell, output).

    The gate ordering is part of the checkpoint contract: the fused weight
    matrices lay gates out as contiguous column blocks in that order.
    """

    def __init__(self, prefix: str, n_in: int, n_hidden: int):
        self.prefix = prefix
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.wx_name = f"{prefix}.wx"
        self.wh_name = f"{prefix}.wh"
        self.b_name = f"{prefix}.b"

    def init_into(self, store: ParameterStore, rng: np.random.Generator) -> None:
        h = self.n_hidden
        store.add(self.wx_name, _uniform_init(rng, (self.n_in, 4 * h), self.n_in))
        store.add(self.wh_name, _uniform_init(rng, (h, 4 * h), h))
        store.add(self.b_name, _uniform_init(rng, (4 * h,), h))

    def step(
        self, params: Dict[str, Tensor], x: Tensor, h: Tensor, c: Tensor
    ) -> Tuple[Tensor, Tensor]:
        n = self.n_hidden
        gates = ad.add(
            ad.add(ad.matmul(x, params[self.wx_name]), ad.matmul(h, params[self.wh_name])),
            params[self.b_name],
        )
        i = ad.sigmoid(ad.slice_(gates, 0, n))
        f = ad.sigmoid(ad.slice_(gates, n, 2 * n))
        g = ad.tanh(ad.slice_(gates, 2 * n, 3 * n))
        o = ad.sigmoid(ad.slice_(gates, 3 * n, 4 * n))
        c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_next = ad.mul(o, ad.tanh(c_next))
        return h_next, c_next


class BidirectionalEncoder:
    """Bidirectional LSTM over a window of samples, projected to a feature vector.

    The final forward and final backward hidden states are concatenated
    (forward block first) and passed through a linear projection to the
    target dimension.
    """

    def __init__(self, prefix: str, n_in: int, n_hidden: int, n_out: int):
        self.prefix = prefix
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.n_out = n_out
        self.fwd = LstmCell(f"{prefix}.fwd", n_in, n_hidden)
        self.bwd = LstmCell(f"{prefix}.bwd", n_in, n_hidden)
        self.proj = Linear(f"{prefix}.proj", 2 * n_hidden, n_out)

    def init_into(self, store: ParameterStore, rng: np.random.Generator) -> None:
        self.fwd.init_into(store, rng)
        self.bwd.init_into(store, rng)
        self.proj.init_into(store, rng)

    def apply(self, params: Dict[str, Tensor], window: Tensor) -> Tensor:
        values = window.values
        single = values.ndim == 2
        if single:
            window = ad.reshape(window, (1, *values.shape))
        batch, m, n_in = window.shape
        if m < 1:
            raise EmptyWindow(f"{self.prefix}: window has no samples")
        if n_in != self.n_in:
            raise ad.ShapeMismatch(f"{self.prefix}.apply", window.shape, (self.n_in,))

        samples = [
            ad.reshape(ad.slice_(window, t, t + 1, axis=1), (batch, n_in)) for t in range(m)
        ]
        h_f = self._run(params, self.fwd, samples)
        h_b = self._run(params, self.bwd, samples[::-1])
        feature = self.proj.apply(params, ad.concat(h_f, h_b, axis=-1))
        if single:
            feature = ad.reshape(feature, (self.n_out,))
        return feature

    @staticmethod
    def _run(params, cell: LstmCell, samples) -> Tensor:
        batch = samples[0].shape[0]
        h = ad.tensor(np.zeros((batch, cell.n_hidden)))
        c = ad.tensor(np.zeros((batch, cell.n_hidden)))
        for x in samples:
            h, c = cell.step(params, x, h, c)
        return h


class TemporalRegressor:
    """Recurrent temporal model plus fully-connected pose regressor."""

    def __init__(self, prefix: str, n_in: int, n_hidden: int, n_out: int):
        self.prefix = prefix
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.n_out = n_out
        self.cell = LstmCell(f"{prefix}.cell", n_in, n_hidden)
        self.head = Linear(f"{prefix}.head", n_hidden, n_out)

    def init_into(self, store: ParameterStore, rng: np.random.Generator) -> None:
        self.cell.init_into(store, rng)
        self.head.init_into(store, rng)

    def zero_state(self, batch: int) -> Tuple[Tensor, Tensor]:
        shape = (batch, self.n_hidden) if batch > 0 else (self.n_hidden,)
        return ad.tensor(np.zeros(shape)), ad.tensor(np.zeros(shape))

    def step(
        self,
        params: Dict[str, Tensor],
        z: Tensor,
        state: Tuple[Tensor, Tensor],
    ) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        if z.shape[-1] != self.n_in:
            raise ad.ShapeMismatch(f"{self.prefix}.step", z.shape, (self.n_in,))
        h, c = state
        h, c = self.cell.step(params, z, h, c)
        y = self.head.apply(params, h)
        return y, (h, c)

    @staticmethod
    def detach_state(state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        """Cut the gradient path at a truncated-backprop boundary."""
        h, c = state
        return ad.stop_gradient(h), ad.stop_gradient(c)
