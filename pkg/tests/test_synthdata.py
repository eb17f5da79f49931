import math
from dataclasses import replace

import numpy as np
import pytest

from totem import synthdata as S
from totem.metrics import ATTRIBUTES
from totem.synthdata import ConfigError, SynthConfig

TINY = SynthConfig(h=10, w=10, c=8, num_train_sequences=3, num_test_sequences=4, frames_per_sequence=6, seed=3)


@pytest.fixture(scope="module")
def tiny():
    return S.generate(TINY)


def _clean(cfg, i=0):
    """One attribute-free sequence built straight from a recipe."""
    dirs = S.class_directions(cfg)
    r = S._base_recipe(cfg, 1000 + i, dirs[0])
    return S._sequence(cfg, r, f"s{i}", 0, "train")


def test_same_seed_bit_identical(tiny):
    again = S.generate(TINY)
    for a, b in zip(tiny.sequences, again.sequences):
        assert a.x.tobytes() == b.x.tobytes() and a.xp.tobytes() == b.xp.tobytes()
        assert a.gt == b.gt and a.attributes == b.attributes


def test_different_seed_differs(tiny):
    other = S.generate(replace(TINY, seed=4))
    assert not np.array_equal(other.sequences[0].x, tiny.sequences[0].x)


def test_shapes_and_finiteness(tiny):
    assert len(tiny.train) == 3 and len(tiny.test) == 4
    for s in tiny.sequences:
        assert s.x.shape == (6, 10, 10, 8) == s.xp.shape
        assert np.isfinite(s.x).all() and np.isfinite(s.xp).all()
        assert len(s.gt) == 6


def test_boxes_valid_and_motion_bounded():
    cfg = replace(TINY, attribute_rate=0.0, num_train_sequences=10, num_test_sequences=0)
    for s in S.generate(cfg).sequences:
        cs = []
        for b in s.gt:
            assert b.w >= 1 and b.h >= 1
            assert b.x >= 0 and b.y >= 0 and b.x + b.w <= 10 + 1e-9 and b.y + b.h <= 10 + 1e-9
            cs.append((b.x + b.w / 2, b.y + b.h / 2))
        d = np.linalg.norm(np.diff(np.array(cs), axis=0), axis=1)
        assert (d <= cfg.max_step + 1e-9).all()


def test_transparency_snr_zero_gives_pure_background():
    cfg = replace(TINY, transparency_snr=0.0, attribute_rate=0.0)
    s = _clean(cfg)
    r = s.recipe
    noise_only = replace(cfg, appearance_snr=0.0)
    _, xp0, _ = S.render(r, noise_only)
    assert np.array_equal(s.xp, xp0)
    assert np.abs(s.xp @ r.trans_dirs[0]).mean() < 1.0


def test_signature_offset_matches_snr():
    # with no blur the in-box cells carry exactly snr along the unit signature
    cfg = SynthConfig(h=16, w=16, c=16, rf_sigma=0.0, attribute_rate=0.0, transparency_snr=5.0, seed=11)
    inside, outside = [], []
    for i in range(8):
        s = _clean(cfg, i)
        lab = S.presence_labels(s, 16, 16)
        cov = S.signal_maps(s.recipe, cfg)
        proj = s.xp @ s.recipe.trans_dirs[0]
        inside.append(proj[cov == 1.0])
        outside.append(proj[cov == 0.0])
        assert lab.any()
    inside, outside = np.concatenate(inside), np.concatenate(outside)
    assert len(inside) > 1000
    diff = inside.mean() - outside.mean()
    # noise std 1 along a unit direction; texture means cancel within a sequence
    assert abs(diff - 5.0) < 0.1


def test_appearance_signal_in_first_half_only():
    s = _clean(TINY)
    r = s.recipe
    assert not r.app_dirs[0, 4:].any() and not r.trans_dirs[0, :4].any()


def test_probe_premise_transparent_regime():
    cfg = replace(SynthConfig(), num_train_sequences=6, num_test_sequences=0, attribute_rate=0.0, seed=5)
    ds = S.generate(cfg)
    feats_x, feats_xp, labels = [], [], []
    for s in ds.sequences:
        lab = S.presence_labels(s, cfg.h, cfg.w)
        feats_x.append(s.x.reshape(-1, cfg.c))
        feats_xp.append(s.xp.reshape(-1, cfg.c))
        labels.append(lab.reshape(-1))
    lab = np.concatenate(labels)
    auc_x = S.probe_auc(np.concatenate(feats_x), lab)
    auc_xp = S.probe_auc(np.concatenate(feats_xp), lab)
    assert auc_xp > auc_x > 0.5


def test_probe_auc_oracle():
    f = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert S.probe_auc(f, np.array([False, False, True, True])) == 1.0
    assert S.probe_auc(np.zeros((4, 1)), np.array([False, True, False, True])) == 0.5


def test_config_errors():
    with pytest.raises(ConfigError, match="larger"):
        SynthConfig(h=4, w=4, target_size_range=(3.0, 6.0))
    with pytest.raises(ConfigError, match="valid tags"):
        SynthConfig(forced_attributes=("XX",))


def test_presets():
    d = SynthConfig()
    assert d.appearance_snr < d.transparency_snr
    assert (d.h, d.w, d.c, d.frames_per_sequence, d.num_train_sequences, d.num_test_sequences) == (16, 16, 64, 15, 45, 60)
    # 3 training object classes and 12 test classes
    assert (d.num_train_classes, d.num_test_classes) == (3, 12)
    ref = SynthConfig.reference()
    assert (ref.h, ref.w, ref.c) == (18, 18, 256)


def test_class_split_disjoint(tiny):
    train = {s.class_id for s in tiny.train}
    test = {s.class_id for s in tiny.test}
    assert not train & test
    dirs = S.class_directions(TINY)
    assert len({tuple(np.round(d, 12)) for d in dirs}) == len(dirs)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


def test_heldout_sequences_are_fresh_train_class_sequences(tiny):
    held = S.heldout_sequences(TINY, 4)
    assert len(held) == 4
    assert {s.class_id for s in held} <= {s.class_id for s in tiny.train}
    assert all(s.split == "train" for s in held)
    seen = {s.x.tobytes() for s in tiny.sequences}
    assert not any(s.x.tobytes() in seen for s in held)
    again = S.generate(replace(TINY, num_train_sequences=TINY.num_train_sequences + 4, num_test_sequences=0))
    for a, b in zip(tiny.train, again.train):
        assert a.x.tobytes() == b.x.tobytes() and a.gt == b.gt


class TestAttributes:
    cfg = SynthConfig(h=16, w=16, c=8, frames_per_sequence=15, attribute_rate=0.0, seed=2)

    def _seq(self):
        dirs = S.class_directions(self.cfg)
        r = S._base_recipe(self.cfg, 77, dirs[0])
        r.base_size = (3.0, 3.0)
        r.start_center = (8.0, 8.0)
        r.steps = np.zeros_like(r.steps)
        return S._sequence(self.cfg, r, "a", 0, "train")

    def test_unknown(self):
        with pytest.raises(ConfigError, match="valid tags: IV"):
            S.inject_attribute(self._seq(), "WOBBLE", self.cfg)

    def test_foc_zeroes_signatures(self):
        s = S.inject_attribute(self._seq(), "FOC", self.cfg, span=(10, 15))
        k = S.signal_maps(s.recipe, self.cfg)
        assert not k[10:].any() and k[:10].max() > 0
        # x and x' on occluded frames equal the signature-free render
        noise_only = replace(self.cfg, appearance_snr=0.0, transparency_snr=0.0)
        x0, xp0, _ = S.render(s.recipe, noise_only)
        assert np.array_equal(s.x[10:], x0[10:]) and np.array_equal(s.xp[10:], xp0[10:])
        assert "FOC" in s.attributes

    def test_foc_default_span(self):
        s = S.inject_attribute(self._seq(), "FOC", self.cfg)
        assert s.recipe.visibility.tolist() == [1.0] * 10 + [0.0] * 5

    def test_arc_aspect_change(self):
        s = S.inject_attribute(self._seq(), "ARC", self.cfg)
        a0 = s.gt[0].w / s.gt[0].h
        a1 = s.gt[-1].w / s.gt[-1].h
        assert a1 / a0 >= S.ARC_WARP - 1e-9

    def test_sv_area_ramp(self):
        s = S.inject_attribute(self._seq(), "SV", self.cfg)
        ratio = (s.gt[-1].w * s.gt[-1].h) / (s.gt[0].w * s.gt[0].h)
        assert ratio == pytest.approx(S.SV_SCALE**2, rel=1e-9)

    def test_ov_leaves_grid(self):
        s = S.inject_attribute(self._seq(), "OV", self.cfg)
        assert any(b.w == 0 or b.h == 0 for b in s.gt[5:10])
        assert all(b.w > 0 for b in s.gt[:5])

    def test_iv_gain(self):
        s = S.inject_attribute(self._seq(), "IV", self.cfg)
        assert s.recipe.gain[0] == 1.0 and s.recipe.gain[-1] == pytest.approx(S.IV_FINAL_GAIN)

    def test_fm_larger_steps(self):
        assert S.inject_attribute(self._seq(), "FM", self.cfg).recipe.max_step == S.FM_FACTOR

    def test_rot_angle(self):
        s = S.inject_attribute(self._seq(), "ROT", self.cfg)
        d = s.recipe.trans_dirs
        assert d[0] @ d[-1] == pytest.approx(math.cos(S.ROT_ANGLE))

    @pytest.mark.parametrize("attr", ATTRIBUTES)
    def test_every_tag_recorded_and_finite(self, attr):
        s = S.inject_attribute(self._seq(), attr, self.cfg)
        assert s.attributes == (attr,)
        assert np.isfinite(s.x).all() and np.isfinite(s.xp).all()

    def test_does_not_mutate_input(self):
        s = self._seq()
        before = s.x.copy()
        S.inject_attribute(s, "MB", self.cfg)
        assert np.array_equal(s.x, before) and not s.recipe.mb


def test_export_import_round_trip(tiny, tmp_path):
    root = S.export_dataset(tiny, tmp_path / "bench")
    lines = (root / "split.txt").read_text().splitlines()
    assert lines[0] == "train seq000" and lines[-1] == "test seq006"
    back = S.import_dataset(root)
    for a, b in zip(tiny.sequences, back.sequences):
        assert a.seq_id == b.seq_id and a.split == b.split and a.class_id == b.class_id
        assert a.x.tobytes() == b.x.tobytes() and a.xp.tobytes() == b.xp.tobytes()
        assert a.attributes == b.attributes
        assert [(g.x, g.y, g.w, g.h) for g in a.gt] == [(g.x, g.y, g.w, g.h) for g in b.gt]


def test_import_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="split.txt"):
        S.import_dataset(tmp_path)
