"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
upstream gradient back to them.  Tensors default to float32; wrap code in
``precision("float64")`` for gradient checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype for new tensors."""
    prev = _DEFAULT_DTYPE[0]
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def default_dtype():
    return _DEFAULT_DTYPE[0]


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ops that can turn finite inputs into NaN/Inf; everything else preserves finiteness
# up to overflow, which the loss and gradient checks in backprop catch
_CHECKED = frozenset({"matmul", "affine", "dense_stack", "exp", "log", "div"})


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE[0])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op) -> "Tensor":
        if op in _CHECKED:
            _check(data, op)
        out = Tensor(data)
        out.op = op
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def back(g):
            return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                    _unbroadcast(g, b.shape) if b.requires_grad else None)

        return Tensor._make(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def back(g):
            return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                    _unbroadcast(-g, b.shape) if b.requires_grad else None)

        return Tensor._make(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def back(g):
            return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

        return Tensor._make(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def back(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), back, "div")

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        a, b = self, as_tensor(other, self.dtype)

        def back(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data @ b.data, (a, b), back, "matmul")

    def square(self):
        a = self
        return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")

    # elementwise nonlinearities -------------------------------------------
    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def clip_min(self, floor: float):
        mask = self.data > floor
        out = np.where(mask, self.data, np.asarray(floor, self.dtype))
        return Tensor._make(out, (self,), lambda g: (g * mask,), "clip_min")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        if (self.data <= 0).any():
            raise NonFiniteError("log of non-positive value")
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def softplus(self):
        x = self.data
        out = np.logaddexp(0, x).astype(x.dtype, copy=False)
        sig = _sigmoid(x)
        return Tensor._make(out, (self,), lambda g: (g * sig,), "softplus")

    def sigmoid(self):
        s = _sigmoid(self.data)
        return Tensor._make(s, (self,), lambda g: (g * s * (1 - s),), "sigmoid")

    def log_softmax(self, axis=-1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        soft = np.exp(out)

        def back(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (self,), back, "log_softmax")

    # reductions / indexing ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                            (self,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def pick(self, index):
        """Select ``self[i, index[i]]`` for each row of a 2-d tensor."""
        idx = np.asarray(index, dtype=np.intp)
        rows = np.arange(self.shape[0])
        shape, dt = self.shape, self.dtype

        def back(g):
            full = np.zeros(shape, dtype=dt)
            full[rows, idx] = g
            return (full,)

        return Tensor._make(self.data[rows, idx], (self,), back, "pick")

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def __getitem__(self, key):
        shape, dt = self.shape, self.dtype

        basic = isinstance(key, (slice, int)) or (
            isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key))

        def back(g):
            full = np.zeros(shape, dtype=dt)
            if basic:
                full[key] = g
            else:
                np.add.at(full, key, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[key]), (self,), back, "slice")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as a single graph node."""
    def back(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if (b.requires_grad and g.ndim == 2) else (g if b.requires_grad else None))

    return Tensor._make(x.data @ w.data + b.data, (x, w, b), back, "affine")


def dense_stack(x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor]) -> Tensor:
    """Fully connected ReLU network (no activation on the last layer) as one node.

    Equivalent to chaining :func:`affine` and ``relu`` but records a single
    backward closure, which matters when the graph is rebuilt every step.
    """
    n = len(weights)
    if n == 0 or len(biases) != n:
        raise ValueError("need matching, non-empty weight and bias lists")
    vector = x.ndim == 1
    h = x.data[None, :] if vector else x.data
    acts = [h]
    for i in range(n):
        h = h @ weights[i].data + biases[i].data
        if i < n - 1:
            h = np.maximum(h, 0)
        acts.append(h)

    def back(g):
        g = g[None, :] if vector else g
        gw, gb = [None] * n, [None] * n
        for i in reversed(range(n)):
            if i < n - 1:
                g = g * (acts[i + 1] > 0)
            if weights[i].requires_grad:
                gw[i] = acts[i].T @ g
            if biases[i].requires_grad:
                gb[i] = g.sum(axis=0)
            if i > 0 or x.requires_grad:
                g = g @ weights[i].data.T
        gx = (g[0] if vector else g) if x.requires_grad else None
        return (gx, *gw, *gb)

    out = acts[-1][0] if vector else acts[-1]
    return Tensor._make(out, (x, *weights, *biases), back, "dense_stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE[0]))


def tensor(data, requires_grad=False, name=None) -> Tensor:
    """Build a leaf tensor in the current default precision."""
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE[0]), requires_grad=requires_grad, name=name)


@dataclass
class Graph:
    """Topologically ordered record of the ops that produced ``output``."""

    output: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(output, order)


def backprop(loss: Tensor | Graph, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that do not influence the loss get a zero gradient.
    """
    graph = loss if isinstance(loss, Graph) else Graph.trace(loss)
    out = graph.output
    if out.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.shape}")
    _check(out.data, "loss")
    grads = {id(out): np.ones_like(out.data)}
    for node in reversed(graph.nodes):
        if node._backward is None:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = []
    for t in wrt:
        g = grads.get(id(t))
        if g is not None:
            _check(g, "gradient")
        result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return result


# ---------------------------------------------------------------------------
# losses shared across modules

def kl_to_standard_normal(mu, sigma) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis.

    Returns a scalar for 1-d inputs and one value per row for 2-d inputs.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if (sigma.data <= 0).any():
        raise ValueError("sigma must be strictly positive")
    terms = mu.square() + sigma.square() - 1.0 - 2.0 * sigma.log()
    return 0.5 * terms.sum(axis=-1)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return -logits.log_softmax(axis=-1).pick(labels)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def parameters(groups: Iterable[dict]) -> list[Tensor]:
    return [t for g in groups for t in g.values()]
