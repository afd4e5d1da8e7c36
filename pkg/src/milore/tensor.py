"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order and accumulates (``+=``) into leaf ``grad`` buffers, so a tensor consumed
twice (e.g. the hidden state feeding both the frozen path and every expert)
receives the sum of both contributions.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "embedding_lookup",
    "add",
    "scale",
    "cross_entropy_with_logits",
    "linear",
    "mul",
]

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``grad``; tensors with ``requires_grad=False`` never do.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        out._consumed = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor into every reachable leaf."""
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if self._consumed:
            raise GraphError("backward() already called on this graph; run a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        self._consumed = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return scale(tsum(self, axis=axis, keepdims=keepdims), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T expects a matrix, got shape {self.shape}")
        return transpose(self, (1, 0))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx, unique: bool = False) -> Tensor:
    """Index ``a``; ``unique=True`` promises an integer index has no repeats."""
    shape = a.shape
    scatter = unique or _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if scatter:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(a.data[idx], dtype=DTYPE), (a,), backward)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` of shape (d_out, d_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward)


# -- nonlinearities ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis (shape {x.shape})")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dy,)

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    n = xd.shape[-1]

    def backward(g):
        gw = gb = None
        if weight is not None and weight.requires_grad:
            gw = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g * weight.data if weight is not None else g
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return grads

    parents = (x,) + tuple(p for p in (weight, bias) if p is not None)
    return Tensor._result(out, parents, backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return getitem(table, idx)


def cross_entropy_with_logits(
    logits: Tensor,
    targets,
    index=None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is (M, K); ``targets`` holds M class ids. When ``index`` is
    given only those rows contribute. ``reduction`` is ``"mean"`` or ``"sum"``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (M, K) logits, got {logits.shape}")
    m, k = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != m:
        raise ShapeError(f"{tgt.shape[0]} targets for {m} logit rows")
    rows = np.arange(m) if index is None else np.asarray(index, dtype=np.int64).reshape(-1)
    sel = tgt[rows]
    if sel.size and (sel.min() < 0 or sel.max() >= k):
        raise IndexError(f"target class out of vocabulary [0, {k})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), sel]
    total = nll.sum()
    denom = float(rows.size) if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if reduction == "mean" and rows.size == 0:
        raise ValueError("mean cross-entropy over an empty index set")

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), sel] -= 1.0
        full = np.zeros((m, k), dtype=DTYPE)
        np.add.at(full, rows, p * (float(g) / denom))
        return (full,)

    return Tensor._result(np.asarray(total / denom), (logits,), backward)
