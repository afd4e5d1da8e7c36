"""Central finite-difference gradient checking shared by the test modules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from milore.tensor import Tensor, no_grad

RTOL = 1e-5
ATOL = 1e-8


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> list[tuple[np.ndarray, np.ndarray]]:
    """Run backward once and compare every ``params`` gradient with finite differences.

    Returns (analytic, numeric) pairs; raises AssertionError on mismatch.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    pairs = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        with no_grad():
            numeric = numeric_grad(lambda: float(loss_fn().data), p.data, eps)
        np.testing.assert_allclose(analytic, numeric, rtol=RTOL, atol=ATOL, err_msg=p.name or "")
        pairs.append((analytic, numeric))
    return pairs


def weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar reduction with random weights so that every output entry matters."""
    w = Tensor(rng.normal(size=t.shape))
    return (t * w).sum()
