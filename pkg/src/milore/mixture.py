"""Soft mixture of LoRA experts over a frozen linear projection.

For an input frame ``h`` the module computes::

    o = W0 h + b0 + scale * sum_i p_i(h) * B_i (A_i h),   p(h) = softmax(W_r h)

``W0``/``b0`` are frozen; the experts ``(A_i, B_i)`` and the router ``W_r``
are the only trainable tensors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, linear, softmax

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class Linear:
    """Dense affine map ``x @ weight.T + bias`` with weight (d_out, d_in)."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> "Linear":
        bound = 1.0 / math.sqrt(d_in)
        w = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias


@dataclass
class LoraExpert:
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> "LoraExpert":
        if rank < 1:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        if rank > min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        if 2 * rank > min(d_in, d_out):
            logger.warning("LoRA rank %d is not small relative to min(d_in, d_out)=%d", rank, min(d_in, d_out))
        bound = 1.0 / math.sqrt(d_in)
        A = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return cls(A, B)


@dataclass
class SoftRouter:
    weight: Tensor  # (N, d_in)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, d_in: int, n_experts: int) -> "SoftRouter":
        return cls(Tensor(np.zeros((n_experts, d_in)), requires_grad=True))


def route(router: SoftRouter, h: Tensor) -> Tensor:
    """Per-frame routing weights ``softmax(W_r h_t)``, shape (..., N)."""
    if h.shape[-1] != router.weight.shape[1]:
        raise ShapeError(f"router expects d_in={router.weight.shape[1]}, got input shape {h.shape}")
    return softmax(linear(h, router.weight), axis=-1)


def expert_apply(expert: LoraExpert, h: Tensor) -> Tensor:
    """``B (A h)`` without ever forming the (d_out, d_in) delta."""
    if h.shape[-1] != expert.A.shape[1]:
        raise ShapeError(f"expert A expects d_in={expert.A.shape[1]}, got input shape {h.shape}")
    if expert.B.shape[1] != expert.A.shape[0]:
        raise ShapeError(f"expert B {expert.B.shape} does not match A {expert.A.shape}")
    return linear(linear(h, expert.A), expert.B)


class MiLoreLinear:
    """Frozen affine projection plus N softly-routed LoRA experts.

    Args:
        weight: frozen W0, shape (d_out, d_in).
        bias: frozen b0, shape (d_out,).
        experts: the LoRA experts; at least one.
        router: soft router over the experts.
        scale: multiplier on the expert sum (1.0 reproduces the plain sum).
    """

    def __init__(
        self,
        weight: Tensor,
        bias: Tensor | None,
        experts: list[LoraExpert],
        router: SoftRouter,
        scale: float = 1.0,
    ):
        if len(experts) == 0:
            raise ConfigError("a MiLorE module needs at least one expert")
        if router.n_experts != len(experts):
            raise ConfigError(f"router has {router.n_experts} outputs for {len(experts)} experts")
        d_out, d_in = weight.shape
        for i, e in enumerate(experts):
            if e.A.shape[1] != d_in or e.B.shape[0] != d_out:
                raise ShapeError(f"expert {i} shapes A{e.A.shape} B{e.B.shape} do not fit W0{weight.shape}")
        self.weight = weight
        self.bias = bias
        self.experts = experts
        self.router = router
        self.scale = float(scale)
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        # set by the encoder when routing statistics are being collected
        self.last_routing: np.ndarray | None = None
        self.record_routing = False

    @classmethod
    def from_linear(
        cls,
        base: Linear,
        n_experts: int,
        rank: int,
        rng: np.random.Generator,
        scale: float = 1.0,
    ) -> "MiLoreLinear":
        if n_experts < 1:
            raise ConfigError(f"a MiLorE module needs at least one expert, got N={n_experts}")
        experts = [LoraExpert.init(base.d_in, base.d_out, rank, rng) for _ in range(n_experts)]
        return cls(base.weight, base.bias, experts, SoftRouter.init(base.d_in, n_experts), scale)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def rank(self) -> int:
        return self.experts[0].rank

    def route(self, h: Tensor) -> Tensor:
        return route(self.router, h)

    def frozen(self, h: Tensor) -> Tensor:
        return linear(h, self.weight, self.bias)

    def __call__(self, h: Tensor) -> Tensor:
        return milore_forward(self, h)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias
        for i, e in enumerate(self.experts):
            yield f"{prefix}experts.{i}.A", e.A
            yield f"{prefix}experts.{i}.B", e.B
        yield prefix + "router.weight", self.router.weight


def milore_forward(m: MiLoreLinear, h: Tensor, routing: Tensor | None = None) -> Tensor:
    """Module output for frames ``h`` of shape (..., d_in).

    ``routing`` overrides the router (used to hold the weights fixed in checks).
    """
    if h.shape[-1] != m.d_in:
        raise ShapeError(f"MiLorE module expects d_in={m.d_in}, got input shape {h.shape}")
    p = m.route(h) if routing is None else routing
    if m.record_routing:
        m.last_routing = p.data.copy()
    out = m.frozen(h)
    for i, e in enumerate(m.experts):
        delta = expert_apply(e, h)
        w = p[..., i : i + 1]
        if m.scale != 1.0:
            w = w * m.scale
        out = out + w * delta
    return out


def parameter_partition(m: MiLoreLinear) -> tuple[list[Tensor], list[Tensor]]:
    """(frozen, trainable) tensors of one module."""
    frozen = [m.weight] + ([m.bias] if m.bias is not None else [])
    trainable: list[Tensor] = []
    for e in m.experts:
        trainable += [e.A, e.B]
    trainable.append(m.router.weight)
    return frozen, trainable


def count_elements(tensors) -> int:
    return int(sum(t.size for t in tensors))


__all__ = [
    "ConfigError",
    "Linear",
    "LoraExpert",
    "SoftRouter",
    "MiLoreLinear",
    "route",
    "expert_apply",
    "milore_forward",
    "parameter_partition",
    "count_elements",
]
