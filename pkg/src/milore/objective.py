"""Masked pseudo-label prediction loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import MaskSet
from .tensor import ShapeError, Tensor, cross_entropy_with_logits, getitem, linear


class EmptyMaskError(ValueError):
    """Raised when a batch has no masked frames, so the mean loss is undefined."""


class PredictionHead:
    """Linear map from a hidden frame to K cluster logits (no bias)."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def init(cls, d_model: int, n_classes: int, rng: np.random.Generator) -> "PredictionHead":
        bound = 1.0 / math.sqrt(d_model)
        return cls(Tensor(rng.uniform(-bound, bound, size=(n_classes, d_model)), requires_grad=True))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def __call__(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.weight)

    def named_parameters(self, prefix: str = "head."):
        yield prefix + "weight", self.weight


@dataclass
class MaskedNLL:
    """Summed negative log-likelihood over ``count`` masked frames."""

    total: Tensor
    count: int

    @property
    def mean(self) -> Tensor:
        return self.total * (1.0 / self.count)


def _masked_rows(hidden: Tensor, targets: np.ndarray, masks: MaskSet, valid: np.ndarray | None):
    B, T, _ = hidden.shape
    targets = np.asarray(targets)
    if targets.shape != (B, T):
        raise ShapeError(f"targets shape {targets.shape} != hidden frames {(B, T)}")
    if masks.mask.shape != (B, T):
        raise ShapeError(f"mask shape {masks.mask.shape} != hidden frames {(B, T)}")
    sel = masks.mask if valid is None else masks.mask & valid
    return np.flatnonzero(sel.reshape(-1)), targets.reshape(-1)


def masked_nll(
    hidden: Tensor,
    targets: np.ndarray,
    masks: MaskSet,
    head: PredictionHead,
    valid: np.ndarray | None = None,
) -> MaskedNLL:
    """Summed NLL of the targets at masked (and, if given, valid) frames."""
    rows, flat_targets = _masked_rows(hidden, targets, masks, valid)
    B, T, d = hidden.shape
    if rows.size == 0:
        return MaskedNLL(Tensor(0.0), 0)
    # only masked rows go through the head
    h = getitem(hidden.reshape(B * T, d), rows, unique=True)
    logits = head(h)
    total = cross_entropy_with_logits(logits, flat_targets[rows], reduction="sum")
    return MaskedNLL(total, int(rows.size))


def masked_prediction_loss(
    hidden: Tensor,
    targets: np.ndarray,
    masks: MaskSet,
    head: PredictionHead,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Mean NLL over every masked frame in the batch.

    ``targets`` is an int array (B, T); entries at unmasked or padding frames
    are ignored. Raises :class:`EmptyMaskError` if nothing is masked.
    """
    part = masked_nll(hidden, targets, masks, head, valid)
    if part.count == 0:
        raise EmptyMaskError("batch has no masked frames; resample the masks")
    return part.mean


def joint_continual_loss(new: MaskedNLL, replay: MaskedNLL | None = None) -> Tensor:
    """Mean masked loss over new-language and replayed frames together.

    Equal to the masked loss of the mixed batch: the two parts are pooled by
    frame count, so the result lies between the two per-subset means.
    """
    if replay is None or replay.count == 0:
        if new.count == 0:
            raise EmptyMaskError("no masked frames in either subset")
        return new.mean
    if new.count == 0:
        return replay.mean
    return (new.total + replay.total) * (1.0 / (new.count + replay.count))


def masked_accuracy(hidden: Tensor, targets: np.ndarray, masks: MaskSet, head: PredictionHead) -> float:
    rows, flat = _masked_rows(hidden, targets, masks, None)
    if rows.size == 0:
        return float("nan")
    B, T, d = hidden.shape
    logits = hidden.data.reshape(B * T, d)[rows] @ head.weight.data.T
    return float((logits.argmax(axis=1) == flat[rows]).mean())
