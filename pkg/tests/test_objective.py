import math

import numpy as np
import pytest

from gradcheck import check_grads
from milore.encoder import Encoder, EncoderConfig, FrameBatch, MaskSet, apply_span_mask
from milore.objective import (
    EmptyMaskError,
    MaskedNLL,
    PredictionHead,
    joint_continual_loss,
    masked_accuracy,
    masked_nll,
    masked_prediction_loss,
)
from milore.tensor import Tensor
from milore.trainer import Adam, Model


def mask_of(B, T, pairs):
    m = np.zeros((B, T), dtype=bool)
    for b, t in pairs:
        m[b, t] = True
    return MaskSet(m)


def test_uniform_logits_give_log_k():
    head = PredictionHead(Tensor(np.zeros((8, 4))))
    hidden = Tensor(np.random.default_rng(0).normal(size=(2, 5, 4)))
    for targets in (np.zeros((2, 5), int), np.arange(10).reshape(2, 5) % 8):
        loss = masked_prediction_loss(hidden, targets, mask_of(2, 5, [(0, 1), (1, 4), (1, 0)]), head)
        assert abs(loss.item() - math.log(8)) < 1e-12


def test_confident_head_gives_near_zero_loss():
    K, d = 4, 4
    head = PredictionHead(Tensor(40.0 * np.eye(K, d)))
    targets = np.array([[0, 1, 2, 3]])
    hidden = Tensor(np.eye(4)[None])
    loss = masked_prediction_loss(hidden, targets, mask_of(1, 4, [(0, 0), (0, 2), (0, 3)]), head)
    assert loss.item() < 1e-12


def test_hand_summed_example(rng):
    hidden = rng.normal(size=(1, 3, 2))
    W = rng.normal(size=(3, 2))
    z = np.array([[2, 0, 1]])
    logits = hidden[0] @ W.T
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -(logp[0, 2] + logp[2, 1]) / 2
    got = masked_prediction_loss(Tensor(hidden), z, mask_of(1, 3, [(0, 0), (0, 2)]), PredictionHead(Tensor(W)))
    assert abs(got.item() - expected) < 1e-12


def test_empty_mask_raises(rng):
    with pytest.raises(EmptyMaskError):
        masked_prediction_loss(Tensor(rng.normal(size=(1, 3, 2))), np.zeros((1, 3), int), mask_of(1, 3, []),
                               PredictionHead.init(2, 3, rng))


def test_padding_and_unmasked_targets_are_ignored(rng):
    head = PredictionHead.init(4, 5, rng)
    hidden = rng.normal(size=(2, 6, 4))
    valid = np.ones((2, 6), bool)
    valid[1, 4:] = False
    masks = mask_of(2, 6, [(0, 1), (1, 2), (1, 5)])
    tg = rng.integers(0, 5, size=(2, 6))
    ref = masked_prediction_loss(Tensor(hidden), tg, masks, head, valid=valid).item()
    h2, t2 = hidden.copy(), tg.copy()
    h2[1, 4:] = 1e3
    t2[~masks.mask] = 0
    t2[1, 5] = 3
    assert masked_prediction_loss(Tensor(h2), t2, masks, head, valid=valid).item() == ref


class TestJointLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.head = PredictionHead.init(4, 6, rng)
        self.new = rng.normal(size=(2, 8, 4))
        self.rep = rng.normal(size=(2, 8, 4)) + 2.0
        self.tg = rng.integers(0, 6, size=(4, 8))
        self.masks = mask_of(4, 8, [(b, t) for b in range(4) for t in (1, 2, 5)])

    def part(self, rows):
        h = np.concatenate([self.new, self.rep])[rows]
        return masked_nll(Tensor(h), self.tg[rows], MaskSet(self.masks.mask[rows]), self.head)

    def test_new_only_equals_masked_loss(self):
        new = self.part([0, 1])
        ref = masked_prediction_loss(Tensor(self.new), self.tg[:2], MaskSet(self.masks.mask[:2]), self.head)
        assert joint_continual_loss(new).item() == ref.item()
        assert joint_continual_loss(new, MaskedNLL(Tensor(0.0), 0)).item() == ref.item()

    def test_pooled_loss_is_mixed_batch_loss_and_in_hull(self):
        new, rep = self.part([0, 1]), self.part([2, 3])
        joint = joint_continual_loss(new, rep).item()
        mixed = masked_prediction_loss(
            Tensor(np.concatenate([self.new, self.rep])), self.tg, self.masks, self.head
        ).item()
        assert joint == pytest.approx(mixed, abs=1e-12)
        lo, hi = sorted([new.mean.item(), rep.mean.item()])
        assert lo - 1e-12 <= joint <= hi + 1e-12


def test_gradient_of_head_and_encoder(rng):
    cfg = EncoderConfig(d_feat=3, d_model=4, n_heads=2, d_ffn=8, n_layers=1, codebook_size=3, max_frames=6)
    enc = Encoder(cfg, rng)
    head = PredictionHead.init(4, 3, rng)
    b = FrameBatch.from_arrays([rng.normal(size=(5, 3)), rng.normal(size=(3, 3))], ["A", "A"])
    _, masks = apply_span_mask(b, 2, 0.4, 0)
    tg = rng.integers(0, 3, size=b.valid.shape)
    params = [head.weight, enc.blocks[0].fc1.weight, enc.blocks[0].q.weight, enc.frontend.weight]
    check_grads(lambda: masked_prediction_loss(enc.encode(b, masks)[-1], tg, masks, head, valid=b.valid), params)


def test_loss_decreases_monotonically_on_overfit_set():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(d_feat=4, d_model=8, n_heads=2, d_ffn=16, n_layers=1, codebook_size=4, max_frames=8)
    model = Model(Encoder(cfg, rng), PredictionHead.init(8, 4, rng))
    b = FrameBatch.from_arrays([rng.normal(size=(8, 4)) for _ in range(200)], ["A"] * 200)
    tg = (b.features[..., 0] > 0).astype(int) + 2 * (b.features[..., 1] > 0)
    _, masks = apply_span_mask(b, 2, 0.2, 1)
    opt, named, losses = Adam(), model.named_parameters(), []
    for _ in range(50):
        loss = masked_prediction_loss(model.encoder.encode(b, masks)[-1], tg, masks, model.head, valid=b.valid)
        losses.append(loss.item())
        model.zero_grad()
        loss.backward()
        opt.step(named, 2e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_masked_accuracy_perfect_head():
    head = PredictionHead(Tensor(np.eye(3)))
    hidden = Tensor(np.eye(3)[None])
    assert masked_accuracy(hidden, np.array([[0, 1, 2]]), mask_of(1, 3, [(0, 0), (0, 2)]), head) == 1.0
