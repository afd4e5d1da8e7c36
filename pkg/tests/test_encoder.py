import logging

import numpy as np
import pytest

from gradcheck import check_grads
from milore.encoder import (
    Encoder,
    EncoderConfig,
    FrameBatch,
    MaskConfig,
    MiLoreConfig,
    apply_span_mask,
    frontend,
)
from milore.mixture import ConfigError, parameter_partition
from milore.objective import PredictionHead, masked_prediction_loss
from milore.tensor import ShapeError, Tensor, layer_norm


def tiny(**kw) -> EncoderConfig:
    base = dict(d_feat=6, d_model=8, n_heads=2, d_ffn=16, n_layers=2, codebook_size=5, max_frames=12)
    base.update(kw)
    return EncoderConfig(**base)


def batch(rng, lengths=(7, 5, 3), d=6) -> FrameBatch:
    return FrameBatch.from_arrays([rng.normal(size=(n, d)) for n in lengths], ["A"] * len(lengths))


class TestFrontend:
    def test_identity(self, rng):
        enc = Encoder(tiny(d_feat=8), rng)
        enc.frontend.weight.data[...] = np.eye(8)
        enc.frontend.bias.data[...] = 0
        x = rng.normal(size=(2, 3, 8))
        np.testing.assert_array_equal(frontend(Tensor(x), enc).data, x)

    def test_zero_input_gives_bias(self, rng):
        enc = Encoder(tiny(), rng)
        out = frontend(Tensor(np.zeros((2, 3, 6))), enc).data
        np.testing.assert_array_equal(out, np.broadcast_to(enc.frontend.bias.data, (2, 3, 8)))

    def test_matches_affine_oracle(self, rng):
        enc = Encoder(tiny(), rng)
        x = rng.normal(size=(2, 4, 6))
        expected = np.einsum("btf,df->btd", x, enc.frontend.weight.data) + enc.frontend.bias.data
        np.testing.assert_allclose(frontend(Tensor(x), enc).data, expected, atol=1e-12)


class TestSpanMask:
    def test_coverage_close_to_span_times_prob(self):
        b = FrameBatch(np.zeros((10, 1000, 1)), np.full(10, 1000), ["A"] * 10)
        _, m = apply_span_mask(b, span=10, prob=0.005, rng=0)
        assert abs(m.mask.mean() - 10 * 0.005) < 0.02

    def test_span_one_masks_exactly_the_starts(self):
        b = FrameBatch(np.zeros((4, 200, 1)), np.full(4, 200), ["A"] * 4)
        _, m = apply_span_mask(b, span=1, prob=0.1, rng=np.random.default_rng(5))
        rng = np.random.default_rng(5)
        expected = np.zeros((4, 200), dtype=bool)
        for i in range(4):
            starts = np.flatnonzero(rng.random(200) < 0.1)
            if starts.size == 0:
                starts = np.array([rng.integers(200)])
            expected[i, starts] = True
        np.testing.assert_array_equal(m.mask, expected)

    def test_deterministic(self, rng):
        b = batch(rng)
        assert np.array_equal(apply_span_mask(b, 3, 0.2, 7)[1].mask, apply_span_mask(b, 3, 0.2, 7)[1].mask)

    def test_masks_stay_inside_utterances_and_are_nonempty(self, rng):
        b = batch(rng, lengths=(9, 2, 5, 30))
        for seed in range(50):
            _, m = apply_span_mask(b, 4, 0.01, seed)
            assert not (m.mask & ~b.valid).any()
            assert all(m.indices(i).size > 0 for i in range(4))

    def test_single_frame_utterance_skipped_with_warning(self, rng, caplog):
        b = batch(rng, lengths=(1, 4))
        with caplog.at_level(logging.WARNING):
            _, m = apply_span_mask(b, 2, 0.5, 0)
        assert m.indices(0).size == 0 and m.indices(1).size > 0
        assert "skipped" in caplog.text

    @pytest.mark.parametrize("span,prob", [(0, 0.1), (3, 0.0), (3, 1.0)])
    def test_invalid_parameters(self, rng, span, prob):
        with pytest.raises(ConfigError):
            apply_span_mask(batch(rng), span, prob, 0)

    def test_masked_frames_take_mask_embedding(self, rng):
        enc = Encoder(tiny(), rng)
        b = batch(rng)
        _, m = apply_span_mask(b, 2, 0.3, 1)
        h0 = enc.encode(b, m)[0].data
        bi, t = np.argwhere(m.mask)[0]
        np.testing.assert_allclose(h0[bi, t], enc.mask_emb.data + enc.pos_emb.data[t], atol=1e-12)


class TestEncode:
    def test_returns_every_layer(self, rng):
        enc = Encoder(tiny(n_layers=3), rng)
        hs = enc.encode(batch(rng))
        assert len(hs) == 4 and all(h.shape == (3, 7, 8) for h in hs)

    def test_no_blocks_returns_embedding_only(self, rng):
        enc = Encoder(tiny(n_layers=0), rng)
        b = batch(rng)
        hs = enc.encode(b)
        assert len(hs) == 1
        expected = frontend(Tensor(b.features), enc).data + enc.pos_emb.data[:7]
        np.testing.assert_array_equal(hs[0].data, expected)

    def test_single_frame_single_head_attention(self, rng):
        enc = Encoder(tiny(n_heads=1), rng)
        blk = enc.blocks[0]
        x = rng.normal(size=(1, 1, 8))
        h = layer_norm(Tensor(x), blk.ln1_w, blk.ln1_b).data[0, 0]
        v = blk.v.weight.data @ h + blk.v.bias.data
        expected = blk.o.weight.data @ v + blk.o.bias.data
        out = blk.attention(layer_norm(Tensor(x), blk.ln1_w, blk.ln1_b), np.zeros((1, 1, 1, 1))).data
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)

    def test_zero_delta_milore_matches_plain_encoder(self, rng):
        enc = Encoder(tiny(), rng)
        b = batch(rng)
        before = [h.data.copy() for h in enc.encode(b)]
        enc.install_milore(MiLoreConfig(2, 3), np.random.default_rng(9))
        after = enc.encode(b)
        assert all(np.array_equal(x, y.data) for x, y in zip(before, after))

    def test_padding_content_does_not_leak(self, rng):
        enc = Encoder(tiny(), rng)
        b = batch(rng)
        noisy = FrameBatch(b.features.copy(), b.lengths, b.language_ids)
        noisy.features[~b.valid] = rng.normal(size=noisy.features[~b.valid].shape) * 100
        for h1, h2 in zip(enc.encode(b), enc.encode(noisy)):
            np.testing.assert_allclose(h1.data[b.valid], h2.data[b.valid], atol=1e-12)

    def test_batch_permutation_equivariance(self, rng):
        enc = Encoder(tiny(), rng)
        b = batch(rng)
        perm = np.array([2, 0, 1])
        pb = FrameBatch(b.features[perm], b.lengths[perm], [b.language_ids[i] for i in perm])
        np.testing.assert_allclose(enc.encode(pb)[-1].data, enc.encode(b)[-1].data[perm], atol=1e-12)

    def test_shape_errors(self, rng):
        enc = Encoder(tiny(), rng)
        with pytest.raises(ShapeError):
            enc.encode(batch(rng, d=5))
        with pytest.raises(ShapeError):
            enc.encode(batch(rng, lengths=(13,)))

    def test_reinstall_with_other_shape_is_rejected(self, rng):
        enc = Encoder(tiny(), rng)
        enc.install_milore(MiLoreConfig(2, 3), rng)
        with pytest.raises(ConfigError):
            enc.install_milore(MiLoreConfig(3, 2), rng)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            tiny(d_model=9).validate()


class TestContinualFreeze:
    def test_only_expert_and_router_tensors_get_gradients(self, rng):
        enc = Encoder(tiny(), rng)
        enc.install_milore(MiLoreConfig(2, 2), rng)
        enc.freeze_backbone()
        for _, m in enc.milore_modules():
            for e in m.experts:
                e.B.data[...] = rng.normal(size=e.B.shape)
        head = PredictionHead.init(8, 5, rng)
        b = batch(rng)
        _, masks = apply_span_mask(b, 2, 0.3, 3)
        tg = rng.integers(0, 5, size=b.valid.shape)
        masked_prediction_loss(enc.encode(b, masks)[-1], tg, masks, head, valid=b.valid).backward()
        got = {id(t) for _, t in enc.named_parameters() if t.grad is not None and np.any(t.grad)}
        expected = {id(t) for _, m in enc.milore_modules() for t in parameter_partition(m)[1]}
        assert got == expected


def test_attention_and_expert_gradients_tiny_model(rng):
    enc = Encoder(tiny(), rng)
    enc.install_milore(MiLoreConfig(2, 2), rng)
    enc.freeze_backbone()
    for _, m in enc.milore_modules():
        for e in m.experts:
            e.B.data[...] = rng.normal(scale=0.3, size=e.B.shape)
        m.router.weight.data[...] = rng.normal(scale=0.3, size=m.router.weight.shape)
    blk = enc.blocks[0]
    for t in (blk.q.weight, blk.k.weight, blk.v.weight, blk.o.weight):
        t.requires_grad = True
    head = PredictionHead.init(8, 5, rng)
    b = batch(rng, lengths=(5, 3))
    _, masks = apply_span_mask(b, 2, 0.3, 3)
    tg = rng.integers(0, 5, size=b.valid.shape)
    fc1 = enc.blocks[1].fc1
    params = [fc1.experts[0].A, fc1.experts[1].B, fc1.router.weight, head.weight,
              blk.q.weight, blk.k.weight, blk.v.weight, blk.o.weight]
    check_grads(lambda: masked_prediction_loss(enc.encode(b, masks)[-1], tg, masks, head, valid=b.valid), params)
