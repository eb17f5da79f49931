import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totem import metrics as M
from totem.metrics import BoundingBox as B


class TestIoU:
    def test_self(self):
        assert M.iou(B(1, 2, 3, 4), B(1, 2, 3, 4)) == 1.0

    def test_disjoint(self):
        assert M.iou(B(0, 0, 2, 2), B(5, 5, 2, 2)) == 0.0

    def test_half_overlap(self):
        assert M.iou(B(0, 0, 10, 10), B(5, 0, 10, 10)) == 1 / 3

    def test_zero_union(self):
        assert M.iou(B(0, 0, 0, 0), B(0, 0, 0, 0)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.0, 20.0), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a, b = B(v[0], v[1], v[2] + 0.1, v[3] + 0.1), B(v[4], v[5], v[6] + 0.1, v[7] + 0.1)
        x = M.iou(a, b)
        assert 0.0 <= x <= 1.0
        assert x == M.iou(b, a)


class TestCenterError:
    def test_identical(self):
        assert M.center_error(B(3, 3, 4, 4), B(3, 3, 4, 4)) == 0.0

    def test_345(self):
        assert M.center_error(B(-1, -1, 2, 2), B(2, 3, 2, 2)) == 5.0

    def test_symmetric(self):
        a, b = B(0.5, 1, 3, 7), B(4, -2, 1, 1)
        assert M.center_error(a, b) == M.center_error(b, a)

    def test_normalized_tenth(self):
        gt = B(0, 0, 20, 8)
        assert M.normalized_center_error(B(2, 0, 20, 8), gt) == 0.1

    def test_normalized_scale_invariant(self):
        gt, pred = B(1, 2, 5, 3), B(2.5, 1.0, 4, 4)
        k = 7.25
        scaled = lambda b: B(b.x * k, b.y * k, b.w * k, b.h * k)
        assert math.isclose(
            M.normalized_center_error(pred, gt),
            M.normalized_center_error(scaled(pred), scaled(gt)),
            rel_tol=1e-14,
        )

    def test_normalized_zero_extent_excluded(self):
        assert M.normalized_center_error(B(0, 0, 1, 1), B(3, 3, 0, 2)) is None


class TestCurves:
    def test_all_perfect(self):
        c = M.success_curve([1.0] * 5)
        assert c.values[:-1].tolist() == [1.0] * 20 and c.values[-1] == 0.0
        assert M.auc(c) == 20 / 21

    def test_all_half(self):
        c = M.success_curve([0.5, 0.5])
        assert c.values.tolist() == [1.0] * 10 + [0.0] * 11
        assert M.auc(c) == 10 / 21
        assert math.isclose(M.auc(c), 0.47619, abs_tol=1e-5)

    def test_mixed(self):
        c = M.success_curve([0.2, 0.8])
        assert c.values[10] == 0.5

    def test_precision_cases(self):
        assert M.precision_curve([0.0, 0.0]).values.tolist() == [1.0] * 51
        c = M.precision_curve([20.0, 20.0])
        assert c.values.tolist() == [0.0] * 20 + [1.0] * 31
        assert M.precision_curve([10.0, 30.0]).values[20] == 0.5

    def test_normalized_perfect(self):
        assert M.normalized_precision_curve([0.0]).values.tolist() == [1.0] * 51

    def test_empty_is_error(self):
        for fn in (M.success_curve, M.precision_curve, M.normalized_precision_curve):
            with pytest.raises(M.EvaluationError):
                fn([])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_brute_force_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 101))
        ious = rng.choice(np.concatenate([rng.uniform(0, 1, n), M.SUCCESS_THRESHOLDS]), n)
        errs = rng.choice(np.concatenate([rng.uniform(0, 60, n), M.PRECISION_THRESHOLDS]), n)
        nerrs = rng.choice(np.concatenate([rng.uniform(0, 0.6, n), M.NORM_PRECISION_THRESHOLDS]), n)
        suc = M.success_curve(ious)
        pre = M.precision_curve(errs)
        npre = M.normalized_precision_curve(nerrs)
        for k, th in enumerate(M.SUCCESS_THRESHOLDS):
            assert suc.values[k] == sum(1 for v in ious if v > th) / n
        for k, th in enumerate(M.PRECISION_THRESHOLDS):
            assert pre.values[k] == sum(1 for v in errs if v <= th) / n
        for k, th in enumerate(M.NORM_PRECISION_THRESHOLDS):
            assert npre.values[k] == sum(1 for v in nerrs if v <= th) / n
        assert (np.diff(suc.values) <= 0).all()
        assert (np.diff(pre.values) >= 0).all() and (np.diff(npre.values) >= 0).all()
        for c in (suc, pre, npre):
            assert 0.0 <= M.auc(c) <= 1.0

    def test_auc_constant(self):
        assert M.auc(M.Curve(np.arange(5.0), np.ones(5))) == 1.0

    def test_auc_matches_trapezoid_on_point_symmetric_curves(self):
        # mean-of-values and trapezoid/span coincide when v(t) + v(1 - t) is constant
        t = np.linspace(0.0, 1.0, 10001)
        for v in (1.0 / (1.0 + np.exp(12 * (t - 0.5))), 0.9 - 0.8 * t):
            trap = float(np.sum((v[1:] + v[:-1]) / 2 * np.diff(t))) / (t[-1] - t[0])
            assert abs(M.auc(M.Curve(t, v)) - trap) < 1e-9

    def test_auc_monotone_under_domination(self):
        t = np.arange(10.0)
        lo = M.Curve(t, np.linspace(0, 0.5, 10))
        hi = M.Curve(t, np.linspace(0.1, 0.9, 10))
        assert M.auc(lo) <= M.auc(hi)


class TestAnnotationFiles:
    def test_simple(self):
        assert M.parse_annotation_text("0,0,10,10\n") == [B(0, 0, 10, 10)]

    def test_fractional(self):
        (b,) = M.parse_annotation_text("1.5,2.5,3,4")
        assert b.as_tuple() == (1.5, 2.5, 3.0, 4.0)

    def test_wrong_field_count(self):
        with pytest.raises(M.AnnotationError, match="line 1"):
            M.parse_annotation_text("1,2,3")

    def test_malformed_number_names_line(self):
        with pytest.raises(M.AnnotationError, match="line 2"):
            M.parse_annotation_text("1,2,3,4\n1,x,3,4\n")

    def test_round_trip(self, tmp_path):
        boxes = [B(0.1, 2, 3.3333333333333335, 4), B(5, 6, 0, 0)]
        M.write_annotation_file(tmp_path / "g.txt", boxes)
        assert M.parse_annotation_file(tmp_path / "g.txt") == boxes

    def test_attribute_file(self, tmp_path):
        (tmp_path / "a.txt").write_text("IV\nFOC\n")
        assert M.parse_attribute_file(tmp_path / "a.txt") == ["IV", "FOC"]
        (tmp_path / "b.txt").write_text("XX\n")
        with pytest.raises(M.AnnotationError, match="IV, POC"):
            M.parse_attribute_file(tmp_path / "b.txt")


def _seq(name, n, attrs=(), jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    gt = [B(float(i), 2.0, 4.0, 3.0) for i in range(n)]
    pred = [B(b.x + jitter * rng.uniform(-1, 1), b.y, b.w, b.h) for b in gt]
    return M.SequenceResult(name, gt, pred, tuple(attrs))


class TestAttributeReport:
    def test_thirteen_columns(self):
        rep = M.attribute_report({"a": [_seq("s0", 5)]})
        assert M.COLUMNS == ("All", "IV", "POC", "DEF", "MB", "ROT", "BC", "SV", "FOC", "FM", "OV", "LR", "ARC")
        assert list(rep.attribute_auc["a"]) == list(M.COLUMNS)
        assert rep.table().splitlines()[0].split() == list(M.COLUMNS)

    def test_single_tagged_sequence(self):
        s = _seq("s0", 8, ("IV",), jitter=1.0, seed=3)
        rep = M.attribute_report({"t": [s, _seq("s1", 8, (), jitter=2.0, seed=4)]})
        own = M.evaluate_frames([s]).suc_auc
        assert rep.attribute_auc["t"]["IV"] == own

    def test_absent_column(self):
        rep = M.attribute_report({"t": [_seq("s0", 4, ("IV",))]})
        assert rep.attribute_auc["t"]["FOC"] is None
        assert "-" in rep.table().splitlines()[1]

    def test_row_format(self):
        rep = M.attribute_report({"TOTEM": [_seq("s0", 4)]})
        row = rep.table().splitlines()[1].split()
        assert row[0] == "TOTEM" and row[1] == f"{100 * 20 / 21:.1f}"

    def test_gt_against_itself(self):
        m = M.evaluate_frames([_seq("s0", 10), _seq("s1", 3)])
        assert m.suc_auc == 20 / 21 and m.pre_auc == 1.0 and m.npre_auc == 1.0

    def test_ranking(self):
        rep = M.attribute_report({"good": [_seq("s", 6)], "bad": [_seq("s", 6, jitter=3.0, seed=1)]})
        assert rep.ranking() == ["good", "bad"]

    def test_frame_count_mismatch(self):
        with pytest.raises(M.EvaluationError, match="seqX"):
            M.SequenceResult("seqX", [B(0, 0, 1, 1)], [])

    def test_unknown_tag(self):
        with pytest.raises(M.EvaluationError, match="valid tags"):
            M.SequenceResult("s", [B(0, 0, 1, 1)], [B(0, 0, 1, 1)], ("NOPE",))

    def test_absent_target_rule(self):
        assert M.frame_iou(B(1, 1, 0, 0), B(3, 3, 0, 0)) == 1.0
        assert M.frame_iou(B(1, 1, 2, 2), B(3, 3, 0, 0)) == 0.0

    def test_json_and_csv(self, tmp_path):
        rep = M.attribute_report({"a": [_seq("s0", 4)], "b": [_seq("s0", 4, jitter=1.0)]})
        M.write_report_json(rep, tmp_path / "r.json")
        M.write_curves_csv(rep, tmp_path / "c.csv")
        import json

        d = json.loads((tmp_path / "r.json").read_text())
        assert d["ranking"][0] == "a"
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 2 * (21 + 51 + 51)
