"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a value and a gradient buffer of the same shape.
Operations build a graph of parent links plus a backward closure;
``backward()`` on a scalar runs the chain rule in reverse topological
order. The op set is exactly what a few-layer MLP with unit-norm outputs
and the contrastive / distillation losses need, nothing more.

Determinism: graph traversal follows explicit parent tuples (never hash
order) and every backward closure touches a fixed set of buffers in a
fixed order, so repeated runs with identical inputs produce bit-identical
gradients.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

_LOG_FLOOR = 1e-300


class Tensor:
    """A node in the computation graph: float64 value plus gradient buffer.

    Leaf tensors (no parents) double as trainable parameters: their ``grad``
    buffer persists across backward passes and accumulates until zeroed.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[], None]] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad.fill(0.0)

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad buffer."""
        if self.value.ndim != 0:
            raise ShapeError("backward() requires a scalar (0-d) loss tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.ensure_grad()
        self.grad = self.grad + np.ones(())  # seed d(loss)/d(loss) = 1
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf() else "op"
        return f"Tensor(shape={self.value.shape}, {kind})"


def constant(x) -> Tensor:
    """Wrap an array as a graph leaf whose gradient nobody reads."""
    return Tensor(np.asarray(x, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a (1, n) row broadcast over a's rows (bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    row_broadcast = (
        a.value.ndim == 2
        and b.value.ndim == 2
        and b.value.shape == (1, a.value.shape[1])
        and a.value.shape[0] != 1
    )
    if not row_broadcast and a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value, (a, b))

    def _bw():
        a.grad += out.grad
        if row_broadcast:
            b.grad += out.grad.sum(axis=0, keepdims=True)
        else:
            b.grad += out.grad

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value - b.value, (a, b))

    def _bw():
        a.grad += out.grad
        b.grad -= out.grad

    out._backward = _bw
    return out


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.value * c, (a,))

    def _bw():
        a.grad += out.grad * c

    out._backward = _bw
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value + float(c), (a,))

    def _bw():
        a.grad += out.grad

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")
    out = Tensor(a.value @ b.value, (a, b))

    def _bw():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value.T.copy(), (a,))

    def _bw():
        a.grad += out.grad.T

    out._backward = _bw
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError("concat_rows expects equal column counts")
    na = a.value.shape[0]
    out = Tensor(np.vstack([a.value, b.value]), (a, b))

    def _bw():
        a.grad += out.grad[:na]
        b.grad += out.grad[na:]

    out._backward = _bw
    return out


def pick_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Select one entry per row: out[i] = a[i, cols[i]]."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.int64)
    n = a.value.shape[0]
    if cols.shape != (n,):
        raise ShapeError("pick_per_row expects one column index per row")
    rows = np.arange(n)
    out = Tensor(a.value[rows, cols].copy(), (a,))

    def _bw():
        a.grad[rows, cols] += out.grad

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.value, 0.0), (a,))

    def _bw():
        a.grad += out.grad * (a.value > 0.0)

    out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    out = Tensor(y, (a,))

    def _bw():
        a.grad += out.grad * (1.0 - y * y)

    out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    """Natural log, floored at 1e-300 so probability underflow cannot NaN."""
    a = _as_tensor(a)
    v = np.maximum(a.value, _LOG_FLOOR)
    out = Tensor(np.log(v), (a,))

    def _bw():
        a.grad += out.grad / v

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# row-wise softmax family
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (a,))

    def _bw():
        dot = (out.grad * y).sum(axis=1, keepdims=True)
        a.grad += y * (out.grad - dot)

    out._backward = _bw
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    out = Tensor(y, (a,))
    sm = np.exp(y)

    def _bw():
        a.grad += out.grad - sm * out.grad.sum(axis=1, keepdims=True)

    out._backward = _bw
    return out


def normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; gradients flow through the norm."""
    a = _as_tensor(a)
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    if (norms == 0.0).any():
        i = int(np.flatnonzero(norms[:, 0] == 0.0)[0])
        raise DegenerateInputError(f"row {i} has zero norm, cannot normalize")
    y = a.value / norms
    out = Tensor(y, (a,))

    def _bw():
        dot = (out.grad * y).sum(axis=1, keepdims=True)
        a.grad += (out.grad - y * dot) / norms

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value.sum(), (a,))

    def _bw():
        a.grad += float(out.grad)

    out._backward = _bw
    return out


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size
    out = Tensor(a.value.mean(), (a,))

    def _bw():
        a.grad += float(out.grad) / n

    out._backward = _bw
    return out


def sum_squares(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor((a.value * a.value).sum(), (a,))

    def _bw():
        a.grad += 2.0 * a.value * float(out.grad)

    out._backward = _bw
    return out


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(weights * a) with constant weights."""
    a = _as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.value.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {w.shape} vs {a.value.shape}")
    out = Tensor((a.value * w).sum(), (a,))

    def _bw():
        a.grad += float(out.grad) * w

    out._backward = _bw
    return out


def cross_entropy_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits`` rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.value.shape[0]:
        raise ShapeError("labels must be a vector with one entry per logits row")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.value.shape[1]):
        raise ParameterError("label id outside the logits column range")
    logp = log_softmax_rows(logits)
    picked = pick_per_row(logp, labels)
    return mul_scalar(mean_all(picked), -1.0)
