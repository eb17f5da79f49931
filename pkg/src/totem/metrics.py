"""Tracking benchmark metrics: success, precision and normalized precision.

Conventions (OTB / TrackingNet style):

* success: fraction of frames with IoU strictly greater than Th, for
  Th in {0, 0.05, ..., 1};
* precision: fraction of frames with center error <= Th for Th in 0..50;
* normalized precision: center offset scaled by the ground-truth extent,
  fraction <= Th for Th in {0, 0.01, ..., 0.5};
* AUC: the mean of a curve over its uniform threshold grid.

Frames from all sequences are pooled before counting.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

ATTRIBUTES = ("IV", "POC", "DEF", "MB", "ROT", "BC", "SV", "FOC", "FM", "OV", "LR", "ARC")
COLUMNS = ("All",) + ATTRIBUTES

SUCCESS_THRESHOLDS = np.arange(21) / 20.0
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.arange(51) / 100.0


class AnnotationError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def empty(self) -> bool:
        return self.w == 0 or self.h == 0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class Curve:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.thresholds) != len(self.values):
            raise ValueError("curve thresholds and values differ in length")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def normalized_center_error(pred: BoundingBox, gt: BoundingBox) -> float | None:
    """Center offset scaled by (1/w_gt, 1/h_gt); None when gt has no extent."""
    if gt.empty:
        return None
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot((px - gx) / gt.w, (py - gy) / gt.h)


def frame_iou(pred: BoundingBox, gt: BoundingBox) -> float:
    """IoU with the absent-target rule: an empty gt scores 1 only if the prediction is empty too."""
    if gt.empty:
        return 1.0 if pred.empty else 0.0
    return iou(pred, gt)


def _nonempty(values, what: str) -> np.ndarray:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EvaluationError(f"{what}: no frames to evaluate")
    return arr


def success_curve(ious: Iterable[float], thresholds: np.ndarray = SUCCESS_THRESHOLDS) -> Curve:
    v = _nonempty(ious, "success_curve")
    values = (v[None, :] > thresholds[:, None]).mean(axis=1)
    return Curve(np.asarray(thresholds), values)


def precision_curve(errors: Iterable[float], thresholds: np.ndarray = PRECISION_THRESHOLDS) -> Curve:
    v = _nonempty(errors, "precision_curve")
    values = (v[None, :] <= thresholds[:, None]).mean(axis=1)
    return Curve(np.asarray(thresholds), values)


def normalized_precision_curve(
    errors: Iterable[float], thresholds: np.ndarray = NORM_PRECISION_THRESHOLDS
) -> Curve:
    v = _nonempty(errors, "normalized_precision_curve")
    values = (v[None, :] <= thresholds[:, None]).mean(axis=1)
    return Curve(np.asarray(thresholds), values)


def auc(curve: Curve) -> float:
    return float(np.mean(curve.values))


# --------------------------------------------------------------------------
# annotation files


def _fmt(v: float) -> str:
    v = float(v)
    if v.is_integer():
        return str(int(v))
    return repr(v)


def format_box(box: BoundingBox) -> str:
    return ",".join(_fmt(v) for v in box.as_tuple())


def parse_annotation_text(text: str, source: str = "<string>") -> list[BoundingBox]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    boxes = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.strip().split(",")
        if len(fields) != 4:
            raise AnnotationError(
                f"{source}: line {lineno}: expected 4 comma-separated fields, got {len(fields)}"
            )
        try:
            x, y, w, h = (float(f) for f in fields)
        except ValueError as exc:
            raise AnnotationError(f"{source}: line {lineno}: malformed number in {line!r}") from exc
        if not all(math.isfinite(v) for v in (x, y, w, h)) or w < 0 or h < 0:
            raise AnnotationError(f"{source}: line {lineno}: invalid box {line!r}")
        boxes.append(BoundingBox(x, y, w, h))
    return boxes


def parse_annotation_file(path: str | Path) -> list[BoundingBox]:
    path = Path(path)
    return parse_annotation_text(path.read_text(), str(path))


def write_annotation_file(path: str | Path, boxes: Sequence[BoundingBox]) -> None:
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def parse_attribute_file(path: str | Path) -> list[str]:
    tags = [t.strip() for t in Path(path).read_text().splitlines() if t.strip()]
    for t in tags:
        if t not in ATTRIBUTES:
            raise AnnotationError(f"{path}: unknown attribute {t!r}; valid tags: {', '.join(ATTRIBUTES)}")
    return tags


# --------------------------------------------------------------------------
# per-tracker evaluation and reports


@dataclass
class SequenceResult:
    name: str
    gt: list[BoundingBox]
    pred: list[BoundingBox]
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.gt) != len(self.pred):
            raise EvaluationError(
                f"sequence {self.name}: {len(self.pred)} predicted frames vs {len(self.gt)} ground-truth frames"
            )
        for t in self.attributes:
            if t not in ATTRIBUTES:
                raise EvaluationError(
                    f"sequence {self.name}: unknown attribute {t!r}; valid tags: {', '.join(ATTRIBUTES)}"
                )


@dataclass
class TrackerMetrics:
    success: Curve
    precision: Curve
    norm_precision: Curve

    @property
    def suc_auc(self) -> float:
        return auc(self.success)

    @property
    def pre_auc(self) -> float:
        return auc(self.precision)

    @property
    def npre_auc(self) -> float:
        return auc(self.norm_precision)


def evaluate_frames(results: Sequence[SequenceResult]) -> TrackerMetrics:
    ious, errs, nerrs = [], [], []
    skipped = 0
    for r in results:
        for p, g in zip(r.pred, r.gt):
            ious.append(frame_iou(p, g))
            errs.append(center_error(p, g))
            ne = normalized_center_error(p, g)
            if ne is None:
                skipped += 1
            else:
                nerrs.append(ne)
    if skipped:
        log.warning("normalized precision: %d frame(s) with zero-extent ground truth excluded", skipped)
    return TrackerMetrics(success_curve(ious), precision_curve(errs), normalized_precision_curve(nerrs))


@dataclass
class MetricReport:
    trackers: dict[str, TrackerMetrics]
    attribute_auc: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def ranking(self) -> list[str]:
        """Tracker names by descending success AUC (ties by name)."""
        return sorted(self.trackers, key=lambda n: (-self.trackers[n].suc_auc, n))

    def to_dict(self) -> dict:
        out = {"ranking": self.ranking(), "columns": list(COLUMNS), "trackers": {}}
        for name in self.ranking():
            m = self.trackers[name]
            out["trackers"][name] = {
                "success": {"auc": m.suc_auc, "thresholds": m.success.thresholds.tolist(), "values": m.success.values.tolist()},
                "precision": {"auc": m.pre_auc, "thresholds": m.precision.thresholds.tolist(), "values": m.precision.values.tolist()},
                "norm_precision": {
                    "auc": m.npre_auc,
                    "thresholds": m.norm_precision.thresholds.tolist(),
                    "values": m.norm_precision.values.tolist(),
                },
                "attributes": {c: self.attribute_auc[name].get(c) for c in COLUMNS},
            }
        return out

    def table(self) -> str:
        """Per-attribute success AUC (%): one row per tracker, one column per attribute."""
        header = f"{'':<14}" + "".join(f"{c:>7}" for c in COLUMNS)
        rows = [header]
        for name in self.ranking():
            cells = []
            for c in COLUMNS:
                v = self.attribute_auc[name].get(c)
                cells.append(f"{'-':>7}" if v is None else f"{100 * v:>7.1f}")
            rows.append(f"{name:<14}" + "".join(cells))
        return "\n".join(rows)


def attribute_report(trackers: Mapping[str, Sequence[SequenceResult]]) -> MetricReport:
    """Pooled metrics per tracker plus the success-AUC attribute matrix.

    Attributes carried by no sequence are reported as None (absent), not 0.
    """
    report = MetricReport(trackers={})
    for name in sorted(trackers):
        results = sorted(trackers[name], key=lambda r: r.name)
        report.trackers[name] = evaluate_frames(results)
        row: dict[str, float | None] = {"All": report.trackers[name].suc_auc}
        for attr in ATTRIBUTES:
            tagged = [r for r in results if attr in r.attributes]
            row[attr] = evaluate_frames(tagged).suc_auc if tagged else None
        report.attribute_auc[name] = row
    return report


def write_report_json(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n")


def write_curves_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tracker", "metric", "threshold", "value"])
        for name in report.ranking():
            m = report.trackers[name]
            for metric, curve in (("success", m.success), ("precision", m.precision), ("norm_precision", m.norm_precision)):
                for th, v in zip(curve.thresholds, curve.values):
                    w.writerow([name, metric, repr(float(th)), repr(float(v))])
