"""Dense float64 matrices with a define-by-run reverse-mode tape.

Every value is a 2-D matrix (scalars are 1x1). A :class:`Graph` records the
operations of one forward pass; :meth:`Graph.backward` replays them in exact
reverse insertion order and accumulates adjoints into ``.grad``.

Operations are methods on the graph::

    g = Graph()
    z = g.matmul(x, g.transpose(w))
    loss = g.softmax_cross_entropy(z, labels)
    g.backward(loss)

A graph built with ``record=False`` evaluates the same operations without
keeping a tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, DataError, DimensionError, NumericalError

ACTIVATIONS = ("relu", "gelu", "silu")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {what}")


class Tensor2:
    """Row-major float64 matrix with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor2 needs at most 2 dims, got shape {arr.shape}")
        _check_finite(arr, "Tensor2 construction")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False, name=None) -> "Tensor2":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad, name=name)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def copy(self) -> "Tensor2":
        return Tensor2(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor2{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    input_tensors: tuple[Tensor2, ...]
    output_tensor: Tensor2


def _as_tensor(x) -> Tensor2:
    return x if isinstance(x, Tensor2) else Tensor2(x)


def relu_grad(z: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is 0 (inactive neuron)
    return (z > 0).astype(np.float64)


def activation_value(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return 0.5 * z * (1.0 + special.erf(z / _SQRT2))
    if kind == "silu":
        return z * special.expit(z)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_derivative(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu_grad(z)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + special.erf(z / _SQRT2))
        return cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    if kind == "silu":
        s = special.expit(z)
        return s + z * s * (1.0 - s)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Graph:
    """Tape of operations for one forward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _emit(self, kind, inputs, out_data, backward, what=None) -> Tensor2:
        _check_finite(out_data, what or kind)
        needs = any(t.requires_grad for t in inputs)
        out = Tensor2.__new__(Tensor2)
        out.data = np.ascontiguousarray(out_data, dtype=np.float64)
        out.grad = None
        out.requires_grad = needs
        out.name = None
        if self.record and needs:
            self.nodes.append(Node(kind, tuple(id(t) for t in inputs), id(out),
                                   backward, tuple(inputs), out))
        return out

    # -- linear algebra ---------------------------------------------------
    def matmul(self, a: Tensor2, b: Tensor2) -> Tensor2:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.cols != b.rows:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        ad, bd = a.data, b.data
        return self._emit("matmul", (a, b), ad @ bd,
                          lambda g: (g @ bd.T, ad.T @ g))

    def transpose(self, a: Tensor2) -> Tensor2:
        a = _as_tensor(a)
        return self._emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))

    def add(self, a: Tensor2, b: Tensor2) -> Tensor2:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return self._emit("add", (a, b), a.data + b.data, lambda g: (g, g))

    def sub(self, a: Tensor2, b: Tensor2) -> Tensor2:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
        return self._emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def scale(self, a: Tensor2, c: float) -> Tensor2:
        a = _as_tensor(a)
        c = float(c)
        return self._emit("scale", (a,), a.data * c, lambda g: (g * c,))

    def mul(self, a: Tensor2, b: Tensor2) -> Tensor2:
        """Elementwise product."""
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return self._emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))

    def add_scalar(self, a: Tensor2, c: float) -> Tensor2:
        a = _as_tensor(a)
        return self._emit("add_scalar", (a,), a.data + float(c), lambda g: (g,))

    def square(self, a: Tensor2) -> Tensor2:
        a = _as_tensor(a)
        ad = a.data
        return self._emit("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))

    def sum(self, a: Tensor2) -> Tensor2:
        a = _as_tensor(a)
        shape = a.shape
        return self._emit("sum", (a,), np.array([[a.data.sum()]]),
                          lambda g: (np.full(shape, g[0, 0]),))

    def frobenius_sq(self, a: Tensor2) -> Tensor2:
        a = _as_tensor(a)
        ad = a.data
        return self._emit("frobenius_sq", (a,), np.array([[np.sum(ad * ad)]]),
                          lambda g: (2.0 * ad * g[0, 0],))

    # -- nonlinearities ---------------------------------------------------
    def activation(self, z: Tensor2, kind: str) -> Tensor2:
        z = _as_tensor(z)
        out = activation_value(z.data, kind)
        zd = z.data
        return self._emit(kind, (z,), out,
                          lambda g: (g * activation_derivative(zd, kind),))

    def row_softmax(self, a: Tensor2) -> Tensor2:
        a = _as_tensor(a)
        p = np.exp(_log_softmax(a.data))

        def back(g):
            return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

        return self._emit("row_softmax", (a,), p, back)

    def softmax_cross_entropy(self, logits: Tensor2, labels) -> Tensor2:
        logits = _as_tensor(logits)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        n, c = logits.shape
        if labels.shape[0] != n:
            raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
        if np.any(labels < 0) or np.any(labels >= c):
            bad = labels[(labels < 0) | (labels >= c)][0]
            raise DataError(f"label {bad} out of range for {c} classes")
        logp = _log_softmax(logits.data)
        rows = np.arange(n)
        loss = -logp[rows, labels].mean()
        probs = np.exp(logp)

        def back(g):
            d = probs.copy()
            d[rows, labels] -= 1.0
            return (d * (g[0, 0] / n),)

        return self._emit("softmax_cross_entropy", (logits,), np.array([[loss]]), back)

    # -- reverse pass -----------------------------------------------------
    def backward(self, root: Tensor2, seed: np.ndarray | None = None) -> None:
        """Backpropagate from ``root``; a scalar root gets seed 1."""
        if seed is None:
            if root.data.size != 1:
                raise DimensionError("backward on a non-scalar needs an explicit seed")
            seed = np.ones_like(root.data)
        self.backward_from([(root, seed)])

    def backward_from(self, seeds) -> None:
        """Backpropagate several (tensor, adjoint) pairs at once."""
        adj: dict[int, np.ndarray] = {}
        owner: dict[int, Tensor2] = {}
        for t, s in seeds:
            s = np.asarray(s, dtype=np.float64)
            if s.shape != t.shape:
                raise DimensionError(f"seed shape {s.shape} != tensor shape {t.shape}")
            adj[id(t)] = adj[id(t)] + s if id(t) in adj else s.copy()
            owner[id(t)] = t
        for node in reversed(self.nodes):
            g = adj.get(node.output)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.input_tensors, grads):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = np.array(gi, dtype=np.float64)
                    owner[k] = t
        for k, t in owner.items():
            if t.requires_grad:
                t.accumulate(adj[k])


def matmul(a, b) -> Tensor2:
    return Graph(record=False).matmul(a, b)


def activation(z, kind: str) -> Tensor2:
    return Graph(record=False).activation(z, kind)


def softmax_cross_entropy(logits, labels) -> float:
    return Graph(record=False).softmax_cross_entropy(logits, labels).item()


def frobenius_sq(a) -> float:
    a = a.data if isinstance(a, Tensor2) else np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def finite_diff_grad(f: Callable[[Tensor2], float], x: Tensor2, h: float = 1e-5) -> Tensor2:
    """Central-difference gradient of a scalar function of ``x``."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    x = _as_tensor(x)
    base = x.data
    out = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            plus = base.copy()
            plus[i, j] += h
            minus = base.copy()
            minus[i, j] -= h
            fp = f(Tensor2(plus))
            fm = f(Tensor2(minus))
            fp = fp.item() if isinstance(fp, Tensor2) else float(fp)
            fm = fm.item() if isinstance(fm, Tensor2) else float(fm)
            out[i, j] = (fp - fm) / (2.0 * h)
    return Tensor2(out)
