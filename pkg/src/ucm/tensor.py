"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array plus an optional gradient buffer.
Every op records a backward closure and its gradient-carrying parents;
``backward()`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into every reachable tensor that requires
them. Gradients accumulate across calls, so two separate backward passes
over branch losses sum the same way a single pass over their sum does.

Deliberately small: broadcasting only over leading batch axes (a ``[d]``
bias against ``[T, d]`` activations, scalars against anything), and exactly
the ops the encoder stack and losses need. Attention masking happens before
exponentiation, so masked positions get bit-exact zero probability and
never receive gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT1_2 = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (forward-only eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves own a zero grad buffer up front; interior nodes allocate
        # lazily during backward().
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable grad tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor], backprop) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backprop = backprop
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.shape), dtype=np.float64)
    else:
        t.grad += g


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    # only scalar or trailing-suffix broadcasting (leading batch axes)
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small == () or big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_pair(a, b, "add")
    data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_pair(a, b, "mul")
    data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backprop)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU."""
    x = _wrap(x)
    c = erf(x.data * _SQRT1_2)
    data = 0.5 * x.data * (1.0 + c)

    def backprop(g):
        local = 0.5 * (1.0 + c) + x.data * _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * local)

    return _node(data, (x,), backprop)


# shape plumbing ------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backprop(g):
        _accum(x, g.reshape(x.shape))

    return _node(data, (x,), backprop)


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backprop(g):
        _accum(x, g.transpose(inv))

    return _node(data, (x,), backprop)


def gather_rows(x: Tensor, rows) -> Tensor:
    """Select rows along the first axis; backward scatter-adds."""
    x = _wrap(x)
    idx = np.asarray(rows, dtype=np.intp)
    data = x.data[idx]

    def backprop(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    return _node(data, (x,), backprop)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table (differentiable w.r.t. the table)."""
    return gather_rows(table, ids)


def pad_rows(x: Tensor, rows, n_rows: int) -> Tensor:
    """Place rows of ``x`` at the given first-axis indices of a zero tensor."""
    x = _wrap(x)
    idx = np.asarray(rows, dtype=np.intp)
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"pad_rows: {idx.shape[0]} indices for {x.shape[0]} rows")
    data = np.zeros((n_rows,) + x.shape[1:], dtype=np.float64)
    data[idx] = x.data

    def backprop(g):
        _accum(x, g[idx])

    return _node(data, (x,), backprop)


# reductions ----------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.asarray(x.data.sum())

    def backprop(g):
        _accum(x, np.full(x.shape, float(g)))

    return _node(data, (x,), backprop)


def tmean(x: Tensor) -> Tensor:
    x = _wrap(x)
    n = x.data.size
    data = np.asarray(x.data.mean())

    def backprop(g):
        _accum(x, np.full(x.shape, float(g) / n))

    return _node(data, (x,), backprop)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or stacks sharing leading batch axes.

    ``b`` may also be a plain 2-D matrix applied across the leading axes of
    ``a``; anything fancier is out of scope.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: mismatched batch axes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backprop(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == a.ndim:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)
            else:
                k, m = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return _node(data, (a, b), backprop)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` for 1-D or 2-D ``x``, ``w`` of shape [in, out]."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim not in (1, 2) or w.ndim != 2:
        raise ValueError(f"linear: expected 1/2-D input and 2-D weight, got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape} does not match weight {w.shape}")
    data = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
        data = data + b.data
        parents.append(b)

    def backprop(g):
        if x.ndim == 1:
            _accum(x, g @ w.data.T)
            _accum(w, np.outer(x.data, g))
            if b is not None:
                _accum(b, g)
        else:
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            if b is not None:
                _accum(b, g.sum(axis=0))

    return _node(data, tuple(parents), backprop)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: scale/shift {gain.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backprop(g):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * term)
        flat_g = g.reshape(-1, d)
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accum(bias, flat_g.sum(axis=0))

    return _node(data, (x, gain, bias), backprop)


# softmax family ------------------------------------------------------------


def masked_softmax(logits: Tensor, allow) -> Tensor:
    """Softmax over the last axis restricted to ``allow``-True entries.

    Disallowed entries are excluded before exponentiation, so their
    probability is bit-exact zero and no gradient ever flows to them.
    """
    logits = _wrap(logits)
    mask = np.broadcast_to(np.asarray(allow, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("empty attention row")
    shifted = np.where(mask, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(logits, p * (g - dot))

    return _node(p, (logits,), backprop)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmaxes."""
    logits = _wrap(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    flat = logits.data if logits.ndim == 2 else logits.data.reshape(1, -1)
    if y.shape[0] != flat.shape[0]:
        raise ValueError(f"softmax_cross_entropy: {y.shape[0]} labels for {flat.shape[0]} rows")
    n, c = flat.shape
    if (y < 0).any() or (y >= c).any():
        raise ValueError(f"softmax_cross_entropy: label out of range for {c} classes")
    z = flat - flat.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    lse = np.log(ez.sum(axis=-1))
    nll = lse - z[np.arange(n), y]
    data = np.asarray(nll.mean())

    def backprop(g):
        p = ez / ez.sum(axis=-1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        _accum(logits, (p * (float(g) / n)).reshape(logits.shape))

    return _node(data, (logits,), backprop)
