"""Synthetic overhead scenes with small, densely packed aircraft-like targets.

Stands in for proprietary satellite imagery. Objects are rasterised without
anti-aliasing so every ground-truth box is the exact pixel extent of its shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import (Annotation, DatasetManifest, LabeledImage, emit_label_file,
                      save_image, write_manifest)
from .errors import PackingError, ValidationError
from .geometry import CornerBox, corner_to_center, iou_matrix


@dataclass(frozen=True)
class SceneSpec:
    width: int = 416
    height: int = 416
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 8
    max_size: int = 32
    texture: float = 0.15
    class_count: int = 1
    max_iou: float = 0.1
    min_separation: float = 0.0   # extra pixel gap between boxes
    max_retries: int = 500

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"scene size must be positive, got {self.width}x{self.height}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValidationError(f"bad object count range {self.min_objects}..{self.max_objects}")
        if not 3 <= self.min_size <= self.max_size:
            raise ValidationError(f"bad object size range {self.min_size}..{self.max_size}")
        if self.max_size > min(self.width, self.height):
            raise ValidationError("objects larger than the scene")
        if self.class_count < 1:
            raise ValidationError("class_count must be >= 1")


@dataclass
class SyntheticScene:
    image: LabeledImage
    pixels: np.ndarray        # (3, H, W) float32 in [0, 1]
    object_map: np.ndarray    # (H, W) int32, 0 = background, k = annotation k-1
    corner_boxes: list        # pixel CornerBox per annotation


def _aircraft_polygons(size, angle):
    """Fuselage, wing and tail polygons of span ``size`` centred on the origin."""
    r = size / 2.0
    parts = [
        [(-r, -0.13 * r), (r, -0.09 * r), (r, 0.09 * r), (-r, 0.13 * r)],           # fuselage
        [(0.05 * r, -r), (0.35 * r, -r), (0.3 * r, r), (0.0, r)],                   # wings
        [(-0.95 * r, -0.45 * r), (-0.75 * r, -0.45 * r),
         (-0.75 * r, 0.45 * r), (-0.95 * r, 0.45 * r)],                              # tail
    ]
    # keep every vertex inside the circle of diameter ``size``
    k = r / max(math.hypot(x, y) for poly in parts for x, y in poly)
    c, s = math.cos(angle) * k, math.sin(angle) * k
    return [[(x * c - y * s, x * s + y * c) for x, y in poly] for poly in parts]


def _ellipse_polygon(size, angle, n=24):
    a, b = size / 2.0, size / 3.5
    c, s = math.cos(angle), math.sin(angle)
    pts = [(a * math.cos(t), b * math.sin(t)) for t in np.linspace(0, 2 * math.pi, n, endpoint=False)]
    return [[(x * c - y * s, x * s + y * c) for x, y in pts]]


def _render_mask(class_id, size, angle, frac_x, frac_y):
    """Rasterise one object on a small patch; returns a boolean mask."""
    side = int(math.ceil(size)) + 3
    polys = _aircraft_polygons(size, angle) if class_id % 2 == 0 else _ellipse_polygon(size, angle)
    patch = Image.new("L", (side, side), 0)
    draw = ImageDraw.Draw(patch)
    cx, cy = side / 2.0 + frac_x, side / 2.0 + frac_y
    for poly in polys:
        draw.polygon([(cx + x, cy + y) for x, y in poly], fill=255)
    return np.asarray(patch) > 0


def _background(rng, spec):
    h, w = spec.height, spec.width
    base = rng.uniform(0.25, 0.45)
    coarse = rng.standard_normal((max(2, h // 32), max(2, w // 32))).astype(np.float32)
    smooth = np.asarray(Image.fromarray(coarse, "F").resize((w, h), Image.BILINEAR))
    fine = rng.standard_normal((h, w)).astype(np.float32)
    gray = base + spec.texture * (0.6 * smooth + 0.4 * fine)
    tint = rng.uniform(-0.04, 0.04, size=3).astype(np.float32)
    return np.clip(gray[None, :, :] + tint[:, None, None], 0.0, 1.0).astype(np.float32)


def generate_synthetic_scene(spec: SceneSpec, seed: int, count=None) -> SyntheticScene:
    """Render one scene; identical (spec, seed) always yields identical output."""
    spec.validate()
    rng = np.random.default_rng(seed)
    if count is None:
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    pixels = _background(rng, spec)
    object_map = np.zeros((spec.height, spec.width), dtype=np.int32)
    boxes: list = []
    annotations = []

    for k in range(count):
        class_id = int(rng.integers(0, spec.class_count))
        for _ in range(spec.max_retries):
            size = rng.uniform(spec.min_size, spec.max_size)
            mask = _render_mask(class_id, size, rng.uniform(0, 2 * math.pi), rng.uniform(-0.5, 0.5),
                                rng.uniform(-0.5, 0.5))
            ys, xs = np.nonzero(mask)
            y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
            if y1 - y0 > spec.height or x1 - x0 > spec.width:
                continue
            oy = int(rng.integers(-y0, spec.height - y1 + 1))
            ox = int(rng.integers(-x0, spec.width - x1 + 1))
            box = CornerBox(float(ox + x0), float(oy + y0), float(ox + x1), float(oy + y1))
            if boxes:
                grown = np.array([[b.x_min - spec.min_separation, b.y_min - spec.min_separation,
                                   b.x_max + spec.min_separation, b.y_max + spec.min_separation]
                                  for b in boxes])
                if spec.min_separation > 0:
                    if iou_matrix(box.as_array(), grown).max() > 0:
                        continue
                elif iou_matrix(box.as_array(), grown).max() > spec.max_iou:
                    continue
            region = object_map[oy + y0:oy + y1, ox + x0:ox + x1]
            local = mask[y0:y1, x0:x1]
            if np.any(region[local] != 0):
                continue
            region[local] = k + 1
            boxes.append(box)
            annotations.append(Annotation(class_id, corner_to_center(box, spec.width, spec.height)))
            colour = np.float32(rng.uniform(0.85, 1.0)) - rng.uniform(0.0, 0.08, size=3).astype(np.float32)
            sel = object_map == k + 1
            pixels[:, sel] = colour[:, None]
            break
        else:
            raise PackingError(f"could not place object {k + 1} of {count} after "
                               f"{spec.max_retries} attempts (seed {seed})")

    image = LabeledImage(Path(f"scene_{seed}.png"), spec.width, spec.height, annotations)
    return SyntheticScene(image, pixels, object_map, boxes)


def write_synthetic_dataset(root, n_images, spec: SceneSpec = SceneSpec(), seed=0, class_names=None):
    """Write ``n_images`` scenes as a dataset tree and return its manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    if class_names is None:
        class_names = ["aircraft"] if spec.class_count == 1 else [f"class{i}" for i in range(spec.class_count)]
    if len(class_names) != spec.class_count:
        raise ValidationError(f"{len(class_names)} class names for {spec.class_count} classes")
    seeds = np.random.SeedSequence(seed).generate_state(max(n_images, 1))
    digits = max(4, len(str(n_images)))
    items = []
    for i in range(n_images):
        scene = generate_synthetic_scene(spec, int(seeds[i]))
        stem = f"{i:0{digits}d}"
        path = root / "images" / f"{stem}.png"
        save_image(path, scene.pixels)
        (root / "labels" / f"{stem}.txt").write_text(emit_label_file(scene.image.annotations), encoding="utf-8")
        items.append(LabeledImage(path, spec.width, spec.height, scene.image.annotations))
    manifest = DatasetManifest(root, list(class_names), items)
    write_manifest(manifest)
    return manifest
