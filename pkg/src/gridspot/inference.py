"""Decode prediction volumes, suppress duplicates, and detect over large images by tiling."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GridspotError, ValidationError
from .geometry import CenterBox, CornerBox, center_to_corner, corner_to_center, iou_matrix
from .network.head import class_scores, decode_boxes, sigmoid
from .trainer import Letterbox, letterbox

DEFAULT_CONF = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: CenterBox          # normalized to the image (or tile) it was found in

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")

    def corners(self, image_w, image_h) -> CornerBox:
        return center_to_corner(self.box, image_w, image_h)


def decode(pred, anchors, conf_threshold=DEFAULT_CONF):
    """Detections from one (S, S, B, 5 + C) volume, boxes normalized to the network input.

    Score is objectness times the best class score; boxes are clipped to the
    input square and dropped if nothing is left.
    """
    pred = np.asarray(pred)
    priors = np.asarray(getattr(anchors, "priors", anchors), dtype=np.float64)
    if pred.ndim != 4 or pred.shape[0] != pred.shape[1]:
        raise ValidationError(f"expected an (S, S, B, 5+C) volume, got {pred.shape}")
    if pred.shape[2] != len(priors) or pred.shape[3] < 6:
        raise ValidationError(f"volume {pred.shape} inconsistent with {len(priors)} anchors")
    p64 = pred.astype(np.float64)
    obj = sigmoid(p64[..., 4])
    probs = class_scores(p64[..., 5:])
    cls = probs.argmax(axis=-1)
    score = obj * np.take_along_axis(probs, cls[..., None], axis=-1)[..., 0]
    keep = score >= conf_threshold
    if conf_threshold <= 0:
        keep &= score > 0
    if not np.any(keep):
        return []
    boxes = decode_boxes(p64, priors)[keep]
    x0 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0, 1)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0, 1)
    y0 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0, 1)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0, 1)
    out = []
    for c, s, a, b, cc, d in zip(cls[keep], score[keep], x0, y0, x1, y1):
        if cc - a <= 0 or d - b <= 0:
            continue
        out.append(Detection(int(c), float(min(max(s, 0.0), 1.0)),
                             CenterBox((a + cc) / 2, (b + d) / 2, cc - a, d - b)))
    return out


def _order_key(det: Detection):
    return (-det.score, det.box.x, det.box.y)


def nms(dets, iou_threshold=DEFAULT_NMS_IOU):
    """Greedy per-class suppression.

    Walks detections by descending score (ties: smaller x, then smaller y) and
    drops any whose IoU with an already kept box of the same class exceeds
    ``iou_threshold``. Kept detections come back in that same order.
    """
    if any(not math.isfinite(d.score) for d in dets):
        raise ValidationError("non-finite detection score")
    ordered = sorted(dets, key=_order_key)
    if not ordered:
        return []
    boxes = np.array([[d.box.x - d.box.w / 2, d.box.y - d.box.h / 2,
                       d.box.x + d.box.w / 2, d.box.y + d.box.h / 2] for d in ordered])
    classes = np.array([d.class_id for d in ordered])
    overlap = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(ordered), dtype=bool)
    kept = []
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        kept.append(ordered[i])
        suppressed |= (overlap[i] > iou_threshold) & (classes == classes[i])
    return kept


# -- tiling -------------------------------------------------------------------------

@dataclass(frozen=True)
class TilePlan:
    image_w: int
    image_h: int
    tile_size: int
    overlap: int
    xs: tuple
    ys: tuple

    @property
    def stride(self):
        return self.tile_size - self.overlap

    @property
    def offsets(self):
        return [(x, y) for y in self.ys for x in self.xs]

    def __len__(self):
        return len(self.xs) * len(self.ys)

    def window(self, x, y):
        """Pixel region (x0, y0, x1, y1) of the tile at origin (x, y), clamped to the image."""
        return x, y, min(x + self.tile_size, self.image_w), min(y + self.tile_size, self.image_h)

    def owned_region(self, x, y):
        """Part of the image this tile is responsible for.

        Neighbouring tiles split their overlap down the middle, so every point
        belongs to exactly one tile and lies at least overlap/2 from that
        tile's inner edges.
        """
        def bounds(offsets, origin):
            i = offsets.index(origin)
            lo = -math.inf if i == 0 else (origin + offsets[i - 1] + self.tile_size) / 2
            hi = math.inf if i == len(offsets) - 1 else (offsets[i + 1] + origin + self.tile_size) / 2
            return lo, hi

        (x0, x1), (y0, y1) = bounds(self.xs, x), bounds(self.ys, y)
        return x0, y0, x1, y1


def _axis_offsets(dim, tile, stride):
    if dim <= tile:
        return (0,)
    count = math.ceil((dim - tile) / stride) + 1
    return tuple(min(i * stride, dim - tile) for i in range(count))


def plan_tiles(image_w, image_h, tile_size, overlap) -> TilePlan:
    if image_w <= 0 or image_h <= 0:
        raise ConfigError(f"image size must be positive, got {image_w}x{image_h}")
    if tile_size <= 0:
        raise ConfigError(f"tile size must be positive, got {tile_size}")
    if overlap < 0 or overlap >= tile_size:
        raise ConfigError(f"overlap must be in [0, tile size), got {overlap} for tile {tile_size}")
    stride = tile_size - overlap
    return TilePlan(image_w, image_h, tile_size, overlap,
                    _axis_offsets(image_w, tile_size, stride), _axis_offsets(image_h, tile_size, stride))


def lift_box(box: CenterBox, origin, region_w, region_h, image_w, image_h) -> CenterBox:
    """Re-express a box normalized to a region at pixel ``origin`` in full-image terms."""
    corner = center_to_corner(box, region_w, region_h).translate(*origin)
    return corner_to_center(corner.clip(image_w, image_h), image_w, image_h)


def unlift_box(box: CenterBox, origin, region_w, region_h, image_w, image_h) -> CenterBox:
    corner = center_to_corner(box, image_w, image_h).translate(-origin[0], -origin[1])
    return corner_to_center(corner, region_w, region_h)


def _to_source(dets, lb: Letterbox, origin, image_w, image_h):
    """Map detections normalized to the letterboxed input back to the source image."""
    out = []
    for d in dets:
        b = d.box
        (x0, y0), (x1, y1) = lb.to_source([[(b.x - b.w / 2) * lb.size, (b.y - b.h / 2) * lb.size],
                                           [(b.x + b.w / 2) * lb.size, (b.y + b.h / 2) * lb.size]])
        corner = CornerBox(x0 + origin[0], y0 + origin[1], x1 + origin[0], y1 + origin[1]).clip(image_w, image_h)
        if corner.width <= 0 or corner.height <= 0:
            continue
        out.append(Detection(d.class_id, d.score, corner_to_center(corner, image_w, image_h)))
    return out


def _check_network(net):
    if not hasattr(net, "predict"):
        raise ConfigError("detection needs a network with a predict() method")


def detect_image(net, pixels, conf_threshold=DEFAULT_CONF, iou_threshold=DEFAULT_NMS_IOU):
    """Letterbox a whole image into the network and return NMS-filtered detections."""
    _check_network(net)
    _, h, w = pixels.shape
    boxed, lb = letterbox(pixels, net.input_size)
    pred = net.predict(boxed[None])[0]
    return nms(_to_source(decode(pred, net.anchors, conf_threshold), lb, (0, 0), w, h), iou_threshold)


def detect_tiled(net, pixels, plan: TilePlan, conf_threshold=DEFAULT_CONF, iou_threshold=DEFAULT_NMS_IOU,
                 threads=1, ownership=True):
    """Detect over every tile of ``plan`` and merge with one global per-class NMS.

    Tiles are scaled by input_size / tile_size. With ``ownership`` a tile only
    reports boxes whose centers lie in its owned region, so an object cut by a
    tile border is reported by the neighbour that sees it whole.
    """
    _check_network(net)
    _, h, w = pixels.shape
    if (w, h) != (plan.image_w, plan.image_h):
        raise ConfigError(f"plan is for {plan.image_w}x{plan.image_h}, image is {w}x{h}")
    scale = net.input_size / plan.tile_size

    def run(origin):
        x0, y0, x1, y1 = plan.window(*origin)
        try:
            boxed, lb = letterbox(pixels[:, y0:y1, x0:x1], net.input_size, scale=scale)
            pred = net.predict(boxed[None])[0]
            found = _to_source(decode(pred, net.anchors, conf_threshold), lb, origin, w, h)
        except GridspotError as exc:
            raise type(exc)(f"tile at {origin}: {exc}") from exc
        if ownership:
            ox0, oy0, ox1, oy1 = plan.owned_region(*origin)
            found = [d for d in found
                     if ox0 <= d.box.x * w < ox1 and oy0 <= d.box.y * h < oy1]
        return found

    offsets = plan.offsets
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_tile = list(pool.map(run, offsets))
    else:
        per_tile = [run(o) for o in offsets]
    merged = [d for found in per_tile for d in found]
    return nms(merged, iou_threshold)


# -- detection files ------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionRecord:
    image: str
    class_name: str
    score: float
    box: CornerBox


def format_detections(image_name, dets, image_w, image_h, class_names):
    lines = []
    for d in dets:
        c = d.corners(image_w, image_h)
        name = class_names[d.class_id] if d.class_id < len(class_names) else str(d.class_id)
        lines.append(f"{image_name} {name} {d.score:.6f} {c.x_min:.2f} {c.y_min:.2f} {c.x_max:.2f} {c.y_max:.2f}\n")
    return "".join(lines)


def read_detections(path):
    from .errors import ParseError
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields, got {len(parts)}", lineno, path)
        try:
            score = float(parts[2])
            box = CornerBox(*(float(v) for v in parts[3:]))
        except ValueError as exc:
            raise ParseError(str(exc), lineno, path) from None
        records.append(DetectionRecord(parts[0], parts[1], score, box))
    return records


def timed_runs(fn, runs=3):
    """Call ``fn`` ``runs`` times; return (last result, list of wall-clock seconds)."""
    samples = []
    result = None
    for _ in range(max(1, runs)):
        start = time.perf_counter()
        result = fn()
        samples.append(time.perf_counter() - start)
    return result, samples
