"""Match detections to ground truth and summarise precision, recall, F1, accuracy and FPS."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import iou_matrix

DEFAULT_MATCH_IOU = 0.5


@dataclass(frozen=True)
class Match:
    detection: int      # index into the detections as given
    truth: int
    iou: float


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: list = field(default_factory=list)


def match_detections(dets, truths, iou_threshold=DEFAULT_MATCH_IOU):
    """Greedy one-to-one matching.

    ``dets`` are (class_id, score, (x0, y0, x1, y1)) and ``truths`` are
    (class_id, (x0, y0, x1, y1)) in the same pixel frame. Detections are
    visited by descending score (ties by box); each takes the unmatched same-class truth
    with the highest IoU, provided that IoU reaches ``iou_threshold``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    if not dets:
        return MatchResult(0, 0, len(truths))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], tuple(dets[i][2]), dets[i][0]))
    if truths:
        overlap = iou_matrix(np.array([d[2] for d in dets], dtype=np.float64),
                             np.array([t[1] for t in truths], dtype=np.float64))
        truth_cls = np.array([t[0] for t in truths])
    taken = np.zeros(len(truths), dtype=bool)
    matches = []
    for i in order:
        if not truths:
            break
        cand = np.where((truth_cls == dets[i][0]) & ~taken, overlap[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            matches.append(Match(i, j, float(cand[j])))
    tp = len(matches)
    return MatchResult(tp, len(dets) - tp, len(truths) - tp, matches)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    fps: float
    images: int
    iou_threshold: float = DEFAULT_MATCH_IOU
    per_image: tuple = ()       # (name, tp, fp, fn) per image

    def as_dict(self):
        return {
            "images": self.images, "iou": self.iou_threshold,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "accuracy": self.accuracy, "fps": self.fps,
        }


def _ratio(num, den, empty):
    return num / den if den else empty


def compute_report(tp, fp, fn, images, seconds=None, iou_threshold=DEFAULT_MATCH_IOU, per_image=()) -> EvalReport:
    """Summary metrics from counts.

    With nothing predicted, precision is 1 if nothing was missed and 0
    otherwise; recall mirrors this when there is no ground truth. ``seconds``
    is a list of wall-clock totals, one per timed pass over all images; FPS is
    images over the median of those (NaN when untimed).
    """
    if images < 1:
        raise ValidationError("cannot evaluate zero images")
    if min(tp, fp, fn) < 0:
        raise ValidationError("counts must be non-negative")
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    accuracy = _ratio(tp, tp + fp + fn, 1.0)
    fps = float("nan")
    if seconds:
        median = statistics.median(seconds)
        fps = images / median if median > 0 else float("inf")
    return EvalReport(tp, fp, fn, precision, recall, f1, accuracy, fps, images, iou_threshold, tuple(per_image))


def evaluate(per_image, iou_threshold=DEFAULT_MATCH_IOU, seconds=None):
    """Pool matches over ``per_image`` = [(name, dets, truths), ...] and build a report."""
    tp = fp = fn = 0
    rows = []
    for name, dets, truths in per_image:
        m = match_detections(dets, truths, iou_threshold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        rows.append((str(name), m.tp, m.fp, m.fn))
    return compute_report(tp, fp, fn, len(rows), seconds, iou_threshold, rows)


def format_report_table(report: EvalReport, label="gridspot"):
    """Fixed-width table with one row per evaluated model."""
    head = f"{'Model':<12}{'Precision':>11}{'Recall':>9}{'F1':>8}{'Accuracy':>10}{'FPS':>9}"
    row = (f"{label:<12}{report.precision:>11.3f}{report.recall:>9.3f}{report.f1:>8.3f}"
           f"{report.accuracy:>10.3f}{report.fps:>9.2f}")
    return f"{head}\n{row}\n"


def format_report_kv(report: EvalReport):
    out = []
    for key, value in report.as_dict().items():
        out.append(f"{key}={value:.6f}\n" if isinstance(value, float) else f"{key}={value}\n")
    return "".join(out)
