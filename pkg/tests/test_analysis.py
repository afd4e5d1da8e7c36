import json

import numpy as np
import pytest

from milore.analysis import (
    AblationRow,
    count_parameters,
    emit_report,
    expert_activation_profile,
    parameter_shapes,
    read_report_json,
)
from milore.corpus import Utterance
from milore.encoder import Encoder, EncoderConfig, FrameBatch, MiLoreConfig
from milore.mixture import ConfigError
from milore.objective import PredictionHead
from milore.tensor import layer_norm, no_grad
from milore.trainer import Model, ProbeResult, TrainConfig, TrainState, Adam, save_checkpoint

TOY = dict(d_feat=16, d_model=16, n_heads=2, d_ffn=64, n_layers=2, codebook_size=32, max_frames=64)
HUBERT_LARGE = dict(d_feat=512, d_model=1024, n_heads=16, d_ffn=4096, n_layers=24, codebook_size=500, max_frames=1500)


def milore_model(rng, n=2, r=4, **kw):
    cfg = EncoderConfig(**{**TOY, **kw})
    enc = Encoder(cfg, rng)
    enc.install_milore(MiLoreConfig(n, r), rng)
    enc.freeze_backbone()
    return Model(enc, PredictionHead.init(cfg.d_model, cfg.codebook_size, rng))


def utts(rng, lang, n, T=10, d=16, shift=0.0):
    return [Utterance(f"{lang}-{i}", lang, rng.normal(size=(T, d)) + shift, None, 50.0) for i in range(n)]


class TestCounts:
    def test_toy_config_matches_hand_count(self, rng):
        # per block: ln1 32, attention 4*(256+16), ln2 32, fc1 64*16+64, fc2 16*64+16
        frozen = (16 * 16 + 16) + 64 * 16 + 16 + 2 * (32 + 1088 + 32 + 1088 + 1040) + 32
        # per block: fc1 experts 2*(4*16+64*4) + router 2*16, fc2 experts 2*(4*64+16*4) + router 2*64
        trainable = 2 * (640 + 32 + 640 + 128) + 32 * 16
        rep = count_parameters(milore_model(rng))
        assert (rep.trainable, rep.frozen) == (trainable, frozen)
        assert rep.fraction == trainable / (trainable + frozen)
        assert rep.total == sum(r.count for r in rep.rows)

    def test_analytic_count_matches_live_model(self, rng):
        model = milore_model(rng)
        live = count_parameters(model)
        cfg = EncoderConfig(**TOY, milore=MiLoreConfig(2, 4))
        assert [(r.name, r.count, r.trainable) for r in parameter_shapes(cfg)] == [
            (r.name, r.count, r.trainable) for r in live.rows
        ]

    def test_checkpoint_count_matches_live_model(self, rng, tmp_path):
        model = milore_model(rng)
        save_checkpoint(tmp_path / "ck", TrainState(model, Adam(), TrainConfig(), "milore"))
        assert count_parameters(tmp_path / "ck").summary() == count_parameters(model).summary()

    def test_base_model_is_fully_trainable(self, rng):
        enc = Encoder(EncoderConfig(**TOY), rng)
        assert count_parameters(Model(enc, PredictionHead.init(16, 32, rng))).fraction == 1.0

    def test_hubert_large_shape_in_band(self):
        rep = count_parameters(EncoderConfig(**HUBERT_LARGE, milore=MiLoreConfig(2, 12)))
        assert 0.018 <= rep.fraction <= 0.026
        assert rep.trainable == 6_656_000


class TestActivation:
    def test_zero_router_is_uniform(self, rng):
        model = milore_model(rng, n=3, r=2)
        prof = expert_activation_profile(model, {"A": utts(rng, "A", 4), "B": utts(rng, "B", 3, T=70)})
        assert len(prof.cells) == 2 * 2 * 3
        for c in prof.cells:
            assert c.mean_weight == pytest.approx(1 / 3, abs=1e-12)

    def test_two_experts_sum_to_one(self, rng):
        model = milore_model(rng)
        for _, m in model.encoder.milore_modules():
            m.router.weight.data = rng.normal(size=m.router.weight.shape)
        prof = expert_activation_profile(model, {"A": utts(rng, "A", 5)})
        for layer in prof.layers:
            w0, w1 = prof.weight(layer, "A", 0), prof.weight(layer, "A", 1)
            assert 0.0 <= w0 <= 1.0 and abs(w0 + w1 - 1.0) < 1e-9

    def test_constructed_router(self, rng):
        model = milore_model(rng, n_layers=1)
        enc = model.encoder
        blk = enc.blocks[0]
        blk.o.weight.data[...] = 0.0
        blk.o.bias.data[...] = 0.0
        a, b = utts(rng, "A", 6, shift=3.0), utts(rng, "B", 6, shift=-3.0)

        def fc1_inputs(us):
            batch = FrameBatch.from_arrays([u.frames for u in us], ["x"] * len(us))
            with no_grad():
                h0 = enc.encode(batch)[0]
                return layer_norm(h0, blk.ln2_w, blk.ln2_b).data.reshape(-1, 16)

        za, zb = fc1_inputs(a), fc1_inputs(b)
        w = za.mean(0) - zb.mean(0)
        w *= 10.0 / np.min(za @ w)
        blk.fc1.router.weight.data = np.stack([w, np.zeros(16)])
        prof = expert_activation_profile(model, {"A": a, "B": b})
        assert prof.weight(1, "A", 0) > 0.99
        assert prof.weight(1, "B", 0) < prof.weight(1, "A", 0)

    def test_identical_manifests_give_identical_profiles(self, rng):
        model = milore_model(rng)
        for _, m in model.encoder.milore_modules():
            m.router.weight.data = rng.normal(size=m.router.weight.shape)
        data = utts(rng, "A", 5, T=13)
        twin = [Utterance(u.id, "B", u.frames, None, 50.0) for u in data]
        prof = expert_activation_profile(model, {"A": data, "B": twin})
        assert np.array_equal(prof.first_expert_curve("A"), prof.first_expert_curve("B"))

    def test_order_invariance(self, rng):
        model = milore_model(rng)
        for _, m in model.encoder.milore_modules():
            m.router.weight.data = rng.normal(size=m.router.weight.shape)
        data = utts(rng, "A", 7, T=9) + utts(rng, "A", 3, T=20)
        a = expert_activation_profile(model, {"A": data}).first_expert_curve("A")
        b = expert_activation_profile(model, {"A": data[::-1]}).first_expert_curve("A")
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_needs_milore(self, rng):
        with pytest.raises(ConfigError):
            expert_activation_profile(Encoder(EncoderConfig(**TOY), rng), {"A": utts(rng, "A", 1)})


class TestReports:
    def test_empty_inputs_write_valid_tables(self, tmp_path):
        from milore.analysis import ActivationProfile, ParamReport

        written = emit_report(tmp_path, params=ParamReport([]), activation=ActivationProfile([]))
        assert (tmp_path / "params.csv").read_text() == "name,shape,count,trainable\n"
        assert (tmp_path / "activation.csv").read_text() == "layer,language,expert,mean_weight,frames\n"
        assert read_report_json(tmp_path / "activation.json")["cells"] == []
        assert set(written) == {"params", "activation"}

    def test_json_round_trip(self, tmp_path, rng):
        model = milore_model(rng)
        for _, m in model.encoder.milore_modules():
            m.router.weight.data = rng.normal(size=m.router.weight.shape)
        prof = expert_activation_profile(model, {"A": utts(rng, "A", 3)})
        probe = ProbeResult("cluster", 2, 0.123456789012345, {"A": 0.123456789012345}, 30)
        emit_report(tmp_path, params=count_parameters(model), activation=prof, probes=[probe])
        cells = read_report_json(tmp_path / "activation.json")["cells"]
        assert [c["mean_weight"] for c in cells] == [c.mean_weight for c in prof.cells]
        assert read_report_json(tmp_path / "probes.json") == [probe.as_dict()]
        assert read_report_json(tmp_path / "params.json")["summary"] == count_parameters(model).summary()

    def test_ablation_grid_layout(self, tmp_path):
        grid = [(12, 2), (8, 3), (6, 4), (4, 6), (3, 8), (2, 12)]
        rows = [AblationRow(r, n, 100 + i, {"yue": 0.5 + i / 10, "cmn": 0.4, "eng": 0.3}) for i, (r, n) in enumerate(grid)]
        emit_report(tmp_path, ablation=rows, languages=["yue", "cmn", "eng"])
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0] == "lora_rank,n_experts,trainable,yue,cmn,eng,avg"
        assert len(lines) == 7
        assert [tuple(map(int, l.split(",")[:2])) for l in lines[1:]] == grid
        back = json.loads((tmp_path / "ablation.json").read_text())
        assert back[0]["avg"] == rows[0].avg
