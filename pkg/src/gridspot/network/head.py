"""Detection-head math: box decoding, target assignment and the training loss.

Decoding (shared by training and inference), for cell row i, column j and
anchor k with prior (p_w, p_h):

    b_x = (sigmoid(t_x) + j) / S        b_w = p_w * exp(t_w)
    b_y = (sigmoid(t_y) + i) / S        b_h = p_h * exp(t_h)
    objectness = sigmoid(t_o)

Class scores are a sigmoid for a single class and a softmax otherwise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ValidationError
from ..geometry import center_to_corner_array, shape_iou

log = logging.getLogger(__name__)

LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5
OFFSET_EPS = 1e-9


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_scores(logits):
    """Per-class probabilities from the trailing class-logit axis."""
    if logits.shape[-1] == 1:
        return sigmoid(logits)
    return softmax(logits, axis=-1)


def decode_boxes(pred, priors):
    """Normalized center boxes (..., S, S, B, 4) from a prediction volume."""
    s = pred.shape[-4]
    priors = np.asarray(priors, dtype=np.float64)
    grid = np.arange(s, dtype=np.float64)
    bx = (sigmoid(pred[..., 0].astype(np.float64)) + grid[None, :, None]) / s
    by = (sigmoid(pred[..., 1].astype(np.float64)) + grid[:, None, None]) / s
    bw = priors[:, 0] * np.exp(pred[..., 2].astype(np.float64))
    bh = priors[:, 1] * np.exp(pred[..., 3].astype(np.float64))
    return np.stack([bx, by, bw, bh], axis=-1)


@dataclass
class Targets:
    """Per-anchor training targets for a batch.

    ``t`` holds target raw values (t_x, t_y, t_w, t_h) obtained by inverting
    the decode mapping; ``boxes`` the truth boxes; ``mask`` marks responsible
    anchors.
    """

    t: np.ndarray          # (N, S, S, B, 4)
    boxes: np.ndarray      # (N, S, S, B, 4)
    cls: np.ndarray        # (N, S, S, B) int
    mask: np.ndarray       # (N, S, S, B) bool
    dropped: int = 0


def _logit(p):
    p = np.clip(p, OFFSET_EPS, 1.0 - OFFSET_EPS)
    return np.log(p) - np.log1p(-p)


def assign_targets(annotations, anchors, S, num_classes=None) -> Targets:
    """Targets for one image: the cell containing a box center owns it, and the
    anchor with the best centred IoU against the truth shape is positive.

    When that (cell, anchor) is taken the object falls back to its next-best
    anchor; with every anchor in the cell taken it is dropped and counted.
    """
    if S < 1:
        raise ValidationError(f"grid size must be >= 1, got {S}")
    priors = np.asarray(getattr(anchors, "priors", anchors), dtype=np.float64)
    B = len(priors)
    t = np.zeros((S, S, B, 4))
    boxes = np.zeros((S, S, B, 4))
    cls = np.zeros((S, S, B), dtype=np.int64)
    mask = np.zeros((S, S, B), dtype=bool)
    dropped = 0
    for ann in annotations:
        if num_classes is not None and not 0 <= ann.class_id < num_classes:
            raise ValidationError(f"class id {ann.class_id} outside [0, {num_classes})")
        b = ann.box
        i = min(max(int(np.floor(b.y * S)), 0), S - 1)
        j = min(max(int(np.floor(b.x * S)), 0), S - 1)
        ranking = np.argsort(-shape_iou([[b.w, b.h]], priors)[0], kind="stable")
        for k in ranking:
            if not mask[i, j, k]:
                break
        else:
            dropped += 1
            continue
        mask[i, j, k] = True
        cls[i, j, k] = ann.class_id
        boxes[i, j, k] = (b.x, b.y, b.w, b.h)
        t[i, j, k] = (_logit(b.x * S - j), _logit(b.y * S - i),
                      np.log(b.w / priors[k, 0]), np.log(b.h / priors[k, 1]))
    if dropped:
        log.warning("dropped %d object(s) with no free anchor in their cell", dropped)
    return Targets(t[None], boxes[None], cls[None], mask[None], dropped)


def stack_targets(targets):
    return Targets(
        np.concatenate([t.t for t in targets]),
        np.concatenate([t.boxes for t in targets]),
        np.concatenate([t.cls for t in targets]),
        np.concatenate([t.mask for t in targets]),
        sum(t.dropped for t in targets),
    )


def _paired_iou(a, b):
    """Elementwise IoU of two (..., 4) center-box arrays."""
    ca, cb = center_to_corner_array(a), center_to_corner_array(b)
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def objectness_targets(pred, targets: Targets, priors):
    """IoU between each positive's decoded box and its truth (0 elsewhere).

    The loss treats this as a constant: no gradient flows through it.
    """
    iou = _paired_iou(decode_boxes(pred, priors), targets.boxes)
    return np.where(targets.mask, iou, 0.0)


def detection_loss(pred, targets: Targets, priors, iou_targets=None,
                   lambda_coord=LAMBDA_COORD, lambda_noobj=LAMBDA_NOOBJ, reduction="mean"):
    """Sum-squared detection loss and its gradient with respect to ``pred``.

    Terms, summed over anchors:
      positives: lambda_coord * [(sig(t_x) - o_x)^2 + (sig(t_y) - o_y)^2
                 + (sqrt(b_w S) - sqrt(w S))^2 + (sqrt(b_h S) - sqrt(h S))^2]
                 + (sig(t_o) - IoU)^2 + sum_c (p_c - onehot_c)^2
      negatives: lambda_noobj * sig(t_o)^2
    o_x, o_y are the truth center offsets inside the cell; widths are measured
    in grid cells. ``reduction="mean"`` divides by the batch size.
    """
    pred = np.asarray(pred)
    if not np.all(np.isfinite(pred)):
        raise NumericError("prediction volume contains NaN or infinity")
    n, S = pred.shape[0], pred.shape[1]
    C = pred.shape[-1] - 5
    if targets.mask.shape != pred.shape[:-1]:
        raise ValidationError(f"target shape {targets.mask.shape} does not match prediction {pred.shape[:-1]}")
    p64 = pred.astype(np.float64)
    priors = np.asarray(getattr(priors, "priors", priors), dtype=np.float64)
    if iou_targets is None:
        iou_targets = objectness_targets(p64, targets, priors)

    pos = targets.mask
    neg = ~pos
    grad = np.zeros_like(p64)

    sx, sy = sigmoid(p64[..., 0]), sigmoid(p64[..., 1])
    grid = np.arange(S, dtype=np.float64)
    ox = targets.boxes[..., 0] * S - grid[None, None, :, None]
    oy = targets.boxes[..., 1] * S - grid[None, :, None, None]
    rw = np.sqrt(priors[:, 0] * S) * np.exp(p64[..., 2] / 2)
    rh = np.sqrt(priors[:, 1] * S) * np.exp(p64[..., 3] / 2)
    tw, th = np.sqrt(targets.boxes[..., 2] * S), np.sqrt(targets.boxes[..., 3] * S)

    ex, ey, ew, eh = sx - ox, sy - oy, rw - tw, rh - th
    coord = lambda_coord * np.sum(np.where(pos, ex ** 2 + ey ** 2 + ew ** 2 + eh ** 2, 0.0))
    grad[..., 0] = np.where(pos, lambda_coord * 2 * ex * sx * (1 - sx), 0.0)
    grad[..., 1] = np.where(pos, lambda_coord * 2 * ey * sy * (1 - sy), 0.0)
    grad[..., 2] = np.where(pos, lambda_coord * ew * rw, 0.0)
    grad[..., 3] = np.where(pos, lambda_coord * eh * rh, 0.0)

    so = sigmoid(p64[..., 4])
    eo = so - iou_targets
    obj = np.sum(np.where(pos, eo ** 2, 0.0))
    noobj = lambda_noobj * np.sum(np.where(neg, so ** 2, 0.0))
    grad[..., 4] = np.where(pos, 2 * eo, lambda_noobj * 2 * so) * so * (1 - so)

    logits = p64[..., 5:]
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, targets.cls[..., None], 1.0, axis=-1)
    probs = class_scores(logits)
    err = probs - onehot
    cls_loss = np.sum(np.where(pos[..., None], err ** 2, 0.0))
    dprob = np.where(pos[..., None], 2 * err, 0.0)
    if C == 1:
        grad[..., 5:] = dprob * probs * (1 - probs)
    else:
        grad[..., 5:] = probs * (dprob - np.sum(dprob * probs, axis=-1, keepdims=True))

    loss = coord + obj + noobj + cls_loss
    if reduction == "mean":
        loss /= n
        grad /= n
    if not np.isfinite(loss):
        raise NumericError("detection loss is not finite")
    return float(loss), grad.astype(pred.dtype, copy=False)
