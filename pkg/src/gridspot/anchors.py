"""Anchor priors from ground-truth box shapes via k-means with 1 - IoU distance."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import shape_iou


@dataclass(frozen=True)
class AnchorSet:
    priors: np.ndarray                      # (B, 2) normalized (w, h), area ascending
    mean_iou: float = float("nan")
    history: tuple = field(default=(), compare=False)   # mean best IoU per assignment step
    iterations: int = 0

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=np.float64).reshape(-1, 2)
        if len(p) == 0:
            raise ValidationError("anchor set is empty")
        if np.any(p <= 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ValidationError(f"anchor shapes must lie in (0, 1], got {p.tolist()}")
        object.__setattr__(self, "priors", p)

    def __len__(self):
        return len(self.priors)


def _sort_by_area(priors):
    order = np.lexsort((priors[:, 0], priors[:, 0] * priors[:, 1]))
    return priors[order]


def _seed_priors(boxes, k, rng):
    """k-means++ seeding under the 1 - IoU distance."""
    n = len(boxes)
    chosen = [int(rng.integers(n))]
    dist = 1.0 - shape_iou(boxes, boxes[chosen[0]])[:, 0]
    for _ in range(1, k):
        weights = dist ** 2
        total = weights.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining)) if len(remaining) else int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        chosen.append(idx)
        dist = np.minimum(dist, 1.0 - shape_iou(boxes, boxes[idx])[:, 0])
    return boxes[chosen].copy()


def kmeans_anchors(boxes, B=5, seed=0, max_iter=300) -> AnchorSet:
    """Cluster (w, h) shapes into ``B`` priors.

    Lloyd iterations: assign each box to the prior with highest centred IoU,
    then move each prior to the component-wise median of its members. The
    move is taken only when it does not lower the members' summed IoU, which
    keeps the mean best IoU non-decreasing from one iteration to the next.
    Stops when nothing changes or after ``max_iter`` rounds. An empty cluster
    is re-seeded from the box currently worst served by any prior.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if B < 1:
        raise ValidationError(f"need B >= 1, got {B}")
    if len(boxes) < B:
        raise ValidationError(f"need at least B={B} boxes, got {len(boxes)}")
    if np.any(boxes <= 0) or not np.all(np.isfinite(boxes)):
        raise ValidationError("box shapes must be positive and finite")

    rng = np.random.default_rng(seed)
    priors = _seed_priors(boxes, B, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        ious = shape_iou(boxes, priors)
        assign = ious.argmax(axis=1)
        history.append(float(ious.max(axis=1).mean()))
        moved = False
        for k in range(B):
            members = boxes[assign == k]
            if len(members) == 0:
                far = int(np.argmin(shape_iou(boxes, priors).max(axis=1)))
                priors[k] = boxes[far]
                moved = True
                continue
            median = np.median(members, axis=0)
            if np.array_equal(median, priors[k]):
                continue
            gain = shape_iou(members, np.stack([median, priors[k]]))
            if gain[:, 0].sum() >= gain[:, 1].sum():
                priors[k] = median
                moved = True
        if not moved:
            break

    ious = shape_iou(boxes, priors)
    return AnchorSet(_sort_by_area(priors), float(ious.max(axis=1).mean()), tuple(history), it)


def cluster_medians(boxes, anchors: AnchorSet):
    """Component-wise median of the boxes each prior serves best (None if empty)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    assign = shape_iou(boxes, anchors.priors).argmax(axis=1)
    return [np.median(boxes[assign == k], axis=0) if np.any(assign == k) else None
            for k in range(len(anchors))]


def write_anchors(path, anchors: AnchorSet):
    Path(path).write_text("".join(f"{w:.6f} {h:.6f}\n" for w, h in anchors.priors), encoding="utf-8")


def read_anchors(path) -> AnchorSet:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected 'p_w p_h'", lineno, path)
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(f"non-numeric anchor {line!r}", lineno, path) from None
    return AnchorSet(np.array(rows))
