import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from totem import training as TR
from totem.autodiff import NonFiniteError, Param, Tape
from totem.fusion import FusionConfig
from totem.synthdata import SynthConfig, generate
from totem.tracker import Predictor, PredictorConfig, TrackerModel
from totem.training import AdamW, Checkpoint, TrainConfig

FC = FusionConfig(channels=8, num_encoder_layers=1, num_heads=2)
PC = PredictorConfig(channels=8, num_heads=2)
SC = SynthConfig(h=6, w=6, c=8, num_train_sequences=4, num_test_sequences=2, frames_per_sequence=6,
                 target_size_range=(2.0, 3.0), attribute_rate=0.0, seed=1)
TC = TrainConfig(epochs=2, triplets_per_epoch=8, batch_size=4, heldout_triplets=8)


@pytest.fixture(scope="module")
def data():
    return generate(SC)


def _model(seed=0, fcfg=FC):
    return TrackerModel.build(fcfg, PC, seed)


def _snapshot(params):
    return {n: p.value.copy() for n, p in params.items()}


class TestAdamW:
    def test_first_step_example(self):
        p = Param(np.array([1.0]), "p")
        p.grad[...] = 0.5
        AdamW({"p": p}, lr=0.1, weight_decay=0.0).step()
        assert p.value[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_grad_unchanged(self):
        p = Param(np.array([1.0, -2.0]), "p")
        AdamW({"p": p}, lr=0.1, weight_decay=0.0).step()
        assert p.value.tolist() == [1.0, -2.0]

    def test_frozen_bit_identical(self):
        p = Param(np.array([1.0, 2.0]), "p")
        p.trainable = False
        p.grad[...] = 3.0
        opt = AdamW({"p": p}, lr=0.1)
        opt.step()
        assert p.value.tolist() == [1.0, 2.0] and "p" not in opt.m

    def test_decay_geometric(self):
        p = Param(np.array([2.0]), "p")
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
        for _ in range(10):
            opt.step()
        assert p.value[0] == pytest.approx(2.0 * 0.95**10, rel=1e-12)

    def test_bias_correction_oracle(self):
        rng = np.random.default_rng(0)
        p = Param(rng.normal(size=3), "p")
        ref = p.value.copy()
        opt = AdamW({"p": p}, lr=0.01, weight_decay=0.1)
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            p.grad[...] = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p.value, ref, rtol=0, atol=1e-14)

    def test_nan_names_param(self):
        p = Param(np.zeros(2), "fusion.enc0.q.w")
        p.grad[0] = np.nan
        with pytest.raises(NonFiniteError, match="fusion.enc0.q.w"):
            AdamW({p.name: p}, lr=0.1).step()


class TestFreezing:
    def test_trainable_count(self):
        m = TR.freeze_all_except_fusion(_model())
        assert TR.trainable_count(m) == m.fusion.num_params
        TR.unfreeze_all(m)
        assert TR.trainable_count(m) == m.fusion.num_params + m.predictor.num_params

    def test_predictor_untouched_and_fusion_moves(self, data):
        m = TR.freeze_all_except_fusion(_model())
        before_p, before_f = _snapshot(m.predictor.params), _snapshot(m.fusion.params)
        opt = AdamW(m.parameters(), lr=1e-3)
        batches = TR.sample_triplets(data.train, 0, 400, 4)
        for k in range(100):
            opt.zero_grad()
            tape = Tape()
            _, _, L = TR.batch_loss(m, tape, TR.batch_arrays(data.train, batches[k]))
            tape.backward(L)
            opt.step()
            if k == 0:
                assert any(not np.array_equal(p.value, before_f[n]) for n, p in m.fusion.params.items())
        assert all(p.value.tobytes() == before_p[n].tobytes() for n, p in m.predictor.params.items())


class TestSampling:
    def test_deterministic_and_single_sequence(self, data):
        a = TR.sample_triplets(data.train, 5, 20, 4)
        assert a == TR.sample_triplets(data.train, 5, 20, 4)
        assert a != TR.sample_triplets(data.train, 6, 20, 4)
        assert [len(b) for b in a] == [4] * 5
        for t in (t for b in a for t in b):
            assert len({t.tr1, t.tr2, t.te}) == 3 and 0 <= t.seq < len(data.train)

    def test_frame_usage_uniform(self, data):
        trips = [t for b in TR.sample_triplets(data.train[:1], 3, 10_000, 100) for t in b]
        counts = np.bincount([f for t in trips for f in (t.tr1, t.tr2, t.te)], minlength=6)
        expected = 3 * 10_000 / 6
        assert np.abs(counts / expected - 1).max() < 0.05

    def test_test_frame_position_arbitrary(self, data):
        trips = [t for b in TR.sample_triplets(data.train, 3, 200, 10) for t in b]
        assert any(t.te < t.tr1 for t in trips) and any(t.te > t.tr1 for t in trips)

    def test_short_sequence_skipped(self, data, caplog):
        short = replace(data.train[0], seq_id="short", x=data.train[0].x[:2], xp=data.train[0].xp[:2], gt=data.train[0].gt[:2])
        trips = TR.sample_triplets([short, data.train[1]], 0, 10, 5)
        assert all(t.seq == 1 for b in trips for t in b)
        assert "short" in caplog.text


class TestConfig:
    def test_reference_preset(self):
        r = TrainConfig.reference()
        assert (r.epochs, r.triplets_per_epoch, r.batch_size, r.learning_rate) == (25, 4000, 18, 1e-4)

    def test_desk_defaults(self):
        d = TrainConfig()
        assert (d.epochs, d.triplets_per_epoch, d.batch_size, d.step1_epochs) == (20, 200, 8, 10)
        assert (d.beta1, d.beta2, d.eps, d.weight_decay) == (0.9, 0.999, 1e-8, 1e-4)

    def test_text_round_trip(self):
        cfg = TrainConfig(step_mode="one_step", finetune_learning_rate=1e-5, seed=9)
        assert TrainConfig.from_text(cfg.to_text()) == cfg

    def test_parse_errors_name_key_and_line(self):
        with pytest.raises(ValueError, match="line 2: unknown key 'epoch'"):
            TrainConfig.from_text("seed=1\nepoch=3\n")
        with pytest.raises(ValueError, match="line 1: bad value for 'epochs'"):
            TrainConfig.from_text("epochs=many")
        with pytest.raises(ValueError, match="step_mode"):
            TrainConfig.from_text("step_mode=three_step")
        with pytest.raises(ValueError, match="key=value"):
            TrainConfig.from_text("# comment\nepochs 3")


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        m = _model(seed=3)
        m.predictor.params["pred.query"].trainable = False
        mcfg = TR.model_config("totem", FC, PC, (6, 6))
        ck = TR.make_checkpoint(m, mcfg, step=7)
        back = Checkpoint.load(ck.save(tmp_path / "a.ckpt"))
        assert back.step == 7 and back.config_hash == ck.config_hash
        m2 = TR.model_from_checkpoint(back)
        for n, p in m.parameters().items():
            q = m2.parameters()[n]
            assert p.value.tobytes() == q.value.tobytes() and p.trainable == q.trainable

    def test_hash_mismatch(self, tmp_path):
        from totem.tensorio import read_records, write_records

        ck = TR.make_checkpoint(_model(), TR.model_config("totem", FC, PC, (6, 6)))
        rec = read_records(ck.save(tmp_path / "a.ckpt"))
        rec = {k.replace(ck.config_hash, "0" * 16): v for k, v in rec.items()}
        write_records(tmp_path / "b.ckpt", rec)
        with pytest.raises(ValueError, match="hash mismatch"):
            Checkpoint.load(tmp_path / "b.ckpt")

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        mcfg = TR.model_config("totem", FC, PC, (6, 6))
        batches = TR.sample_triplets(data.train, 1, 12, 4)

        def step(m, opt, b):
            opt.zero_grad()
            tape = Tape()
            tape.backward(TR.batch_loss(m, tape, TR.batch_arrays(data.train, b))[2])
            opt.step()

        m = TR.freeze_all_except_fusion(_model(seed=4))
        opt = AdamW(m.parameters(), lr=1e-3)
        step(m, opt, batches[0])
        step(m, opt, batches[1])
        path = TR.make_checkpoint(m, mcfg, opt, opt.t).save(tmp_path / "mid.ckpt")
        step(m, opt, batches[2])

        ck = Checkpoint.load(path)
        m2 = TR.model_from_checkpoint(ck)
        opt2 = AdamW(m2.parameters(), lr=1e-3)
        opt2.load_state_records(ck.optimizer)
        step(m2, opt2, batches[2])
        for n, p in m.parameters().items():
            assert p.value.tobytes() == m2.parameters()[n].value.tobytes()


class TestSchedules:
    def test_same_seed_deterministic(self, data):
        r1 = TR.train(_model(), data.train, replace(TC, step_mode="one_step"))
        r2 = TR.train(_model(), data.train, replace(TC, step_mode="one_step"))
        assert r1.log.rows == r2.log.rows
        for n, p in r1.model.parameters().items():
            assert p.value.tobytes() == r2.model.parameters()[n].value.tobytes()

    def test_two_step_marker_and_frozen_predictor(self, data, tmp_path):
        m = _model()
        before = _snapshot(m.predictor.params)
        res = TR.train(m, data.train, TC)
        assert [r[1] for r in res.log.rows] == ["step1", "step2", "step2"]
        assert ["boundary", "step2", "", "", ""] in res.log.rows
        assert res.log.rows.index(["boundary", "step2", "", "", ""]) == 1
        assert all(p.value.tobytes() == before[n].tobytes() for n, p in res.model.predictor.params.items())
        res.log.write(tmp_path / "loss.csv")
        rows = list(csv.reader(open(tmp_path / "loss.csv")))
        assert rows[0] == ["epoch", "step", "L1", "L2", "total"] and rows[2][0] == "boundary"

    def test_step1_ignores_x(self, data):
        # in step 1 the appearance stream cannot influence the loss or its gradients
        m = TR.freeze_all_except_fusion(_model())
        s1 = TrackerModel(m.predictor, m.fusion.with_config(FC.with_inputs(zero_x=True)))
        x, xp, b1, b2, bt = TR.batch_arrays(data.train, TR.sample_triplets(data.train, 0, 4, 4)[0])
        grads = []
        for xx in (x, np.random.default_rng(0).normal(size=x.shape)):
            for p in m.parameters().values():
                p.zero_grad()
            tape = Tape()
            tape.backward(TR.batch_loss(s1, tape, (xx, xp, b1, b2, bt))[2])
            grads.append({n: p.grad.copy() for n, p in m.fusion.params.items()})
        assert all(np.array_equal(grads[0][n], grads[1][n]) for n in grads[0])

    def test_step2_starts_from_updated_weights(self, data):
        init = _snapshot(_model().fusion.params)
        one = TR.train(_model(), data.train, replace(TC, epochs=2, step_mode="two_step"))
        assert any(not np.array_equal(init[n], p.value) for n, p in one.model.fusion.params.items())

    def test_finetune_unfreezes(self, data):
        cfg = replace(TC, step_mode="two_step_plus_finetune", finetune_epochs=1)
        m = _model()
        res = TR.train(m, data.train, cfg, mcfg=TR.model_config("totem", FC, PC, (6, 6)))
        assert TR.trainable_count(res.model) == res.model.fusion.num_params + res.model.predictor.num_params
        assert "two_step" in res.stages
        assert ["boundary", "finetune", "", "", ""] in res.log.rows

    def test_ffn_fuse_rejects_two_step(self, data):
        with pytest.raises(ValueError, match="two-step"):
            TR.train(_model(fcfg=replace(FC, ffn_fuse_mode=True)), data.train, TC)

    def test_divergence_checkpoint(self, data, tmp_path):
        m = TR.freeze_all_except_fusion(_model())
        m.fusion.params["fusion.e_query"].value[0] = np.nan
        opt = AdamW(m.parameters(), lr=1e-3)
        mcfg = TR.model_config("totem", FC, PC, (6, 6))
        with pytest.raises(TR.TrainingDiverged, match="epoch 0") as err:
            TR.run_epochs(m, data.train, TC, opt, range(1), "one_step", TR.LossLog(), mcfg, tmp_path)
        assert err.value.checkpoint is not None and err.value.checkpoint.exists()


class TestVariants:
    def test_variant_configs(self):
        assert TR.variant_fusion_config("totem_t", 8).zero_transparency_input
        assert TR.variant_fusion_config("ffn_fuse", 8).ffn_fuse_mode
        assert not TR.variant_fusion_config("no_query", 8).use_query_embedding
        assert not TR.variant_fusion_config("no_phi", 8).use_projection_mlp
        with pytest.raises(ValueError, match="unknown variant"):
            TR.variant_fusion_config("totem2", 8)

    def test_attach_copies_predictor(self):
        p = Predictor(PC, seed=1)
        m = TR.attach_fusion(p, FC, seed=5)
        assert m.predictor is not p
        assert all(np.array_equal(m.predictor.params[n].value, q.value) for n, q in p.params.items())
        m.predictor.params["pred.query"].value[0] += 1
        assert p.params["pred.query"].value[0] != m.predictor.params["pred.query"].value[0]
