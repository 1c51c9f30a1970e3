"""Label files, image loading and dataset manifests.

On disk a dataset looks like::

    root/
      images/0000.png      (JPEG or PNG)
      labels/0000.txt      one "<class_id> <x> <y> <w> <h>" line per object
      classes.txt          one class name per line
      manifest.txt         image paths relative to root

Label coordinates are normalized center-form boxes written with 6 decimals.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ParseError, ValidationError
from .geometry import CenterBox, CornerBox, corner_to_center

log = logging.getLogger(__name__)

CLIP_TOLERANCE = 0.01
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: CenterBox


@dataclass
class LabeledImage:
    image_path: Path
    width: int
    height: int
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{self.image_path}: non-positive size {self.width}x{self.height}")

    @property
    def stem(self):
        return Path(self.image_path).stem


@dataclass
class DatasetManifest:
    root: Path
    class_names: list
    items: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            raise ValidationError("a dataset needs at least one class name")

    def __len__(self):
        return len(self.items)

    @property
    def class_count(self):
        return len(self.class_names)


# -- label text -------------------------------------------------------------

def _clip_center(x, y, w, h):
    """Clip a normalized center box to the unit square and return it re-centred."""
    x0, x1 = max(x - w / 2, 0.0), min(x + w / 2, 1.0)
    y0, y1 = max(y - h / 2, 0.0), min(y + h / 2, 1.0)
    return (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0


def parse_label_file(content: str, class_count: int, source=None) -> list:
    """Parse label text into annotations.

    Values may stray outside [0, 1] by at most ``CLIP_TOLERANCE``; boxes are
    then clipped to the image. Anything else raises :class:`ParseError` with
    the 1-based line number.
    """
    annotations = []
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", lineno, source)
        try:
            class_value = float(fields[0])
            coords = [float(v) for v in fields[1:]]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno, source) from None
        if not class_value.is_integer():
            raise ParseError(f"class id {fields[0]!r} is not an integer", lineno, source)
        class_id = int(class_value)
        if not 0 <= class_id < class_count:
            raise ParseError(f"class id {class_id} outside [0, {class_count})", lineno, source)
        if not all(math.isfinite(v) for v in coords):
            raise ParseError("non-finite coordinate", lineno, source)
        for name, value in zip("xywh", coords):
            if value < -CLIP_TOLERANCE or value > 1.0 + CLIP_TOLERANCE:
                raise ParseError(f"{name}={value} outside [0,1]", lineno, source)
        x, y, w, h = coords
        if w <= 0 or h <= 0:
            raise ParseError(f"degenerate size w={w} h={h}", lineno, source)
        x, y, w, h = _clip_center(x, y, w, h)
        if w <= 0 or h <= 0:
            raise ParseError("box lies outside the image", lineno, source)
        annotations.append(Annotation(class_id, CenterBox(x, y, w, h)))
    return annotations


def format_label_line(annotation: Annotation) -> str:
    b = annotation.box
    return f"{annotation.class_id} {b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f}"


def emit_label_file(annotations: Iterable[Annotation]) -> str:
    return "".join(format_label_line(a) + "\n" for a in annotations)


def read_label_path(path, class_count):
    path = Path(path)
    return parse_label_file(path.read_text(encoding="utf-8"), class_count, source=path)


# -- images -----------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode a JPEG/PNG into planar RGB float32 of shape (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255.0)


def save_image(path, pixels):
    """Write planar (3, H, W) [0, 1] pixels to disk; format from the suffix."""
    arr = np.clip(np.asarray(pixels).transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def image_size(path):
    with Image.open(path) as im:
        return im.size


# -- manifests --------------------------------------------------------------

def read_class_names(path):
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise ValidationError(f"{path}: no class names")
    return names


def _find_images(image_dir):
    return sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def build_manifest(root, class_names=None) -> DatasetManifest:
    """Scan ``root/images`` and ``root/labels`` and pair them by file stem."""
    root = Path(root)
    if class_names is None:
        class_names = read_class_names(root / "classes.txt")
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir():
        raise ValidationError(f"{image_dir}: not a directory")
    items = []
    for img in _find_images(image_dir):
        label_path = label_dir / f"{img.stem}.txt"
        if not label_path.exists():
            raise ValidationError(f"{img}: no matching label file {label_path}")
        w, h = image_size(img)
        items.append(LabeledImage(img, w, h, read_label_path(label_path, len(class_names))))
    return DatasetManifest(root, list(class_names), items)


def read_manifest(root) -> DatasetManifest:
    """Load the dataset listed in ``root/manifest.txt`` (falls back to scanning)."""
    root = Path(root)
    listing = root / "manifest.txt"
    if not listing.exists():
        return build_manifest(root)
    class_names = read_class_names(root / "classes.txt")
    items = []
    for rel in listing.read_text(encoding="utf-8").splitlines():
        rel = rel.strip()
        if not rel:
            continue
        img = root / rel
        label_path = root / "labels" / f"{img.stem}.txt"
        if not img.exists():
            raise ValidationError(f"{listing}: missing image {img}")
        if not label_path.exists():
            raise ValidationError(f"{img}: no matching label file {label_path}")
        w, h = image_size(img)
        items.append(LabeledImage(img, w, h, read_label_path(label_path, len(class_names))))
    return DatasetManifest(root, class_names, items)


def write_manifest(manifest: DatasetManifest):
    root = Path(manifest.root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(n + "\n" for n in manifest.class_names), encoding="utf-8")
    lines = []
    for item in manifest.items:
        path = Path(item.image_path)
        try:
            path = path.relative_to(root)
        except ValueError:
            pass
        lines.append(path.as_posix() + "\n")
    (root / "manifest.txt").write_text("".join(lines), encoding="utf-8")


def write_labels(manifest: DatasetManifest):
    label_dir = Path(manifest.root) / "labels"
    label_dir.mkdir(parents=True, exist_ok=True)
    for item in manifest.items:
        (label_dir / f"{item.stem}.txt").write_text(emit_label_file(item.annotations), encoding="utf-8")


def split_manifest(manifest: DatasetManifest, fraction=0.9, seed=0):
    """Seeded shuffle then split into (train, holdout) manifests."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"split fraction must be in (0, 1], got {fraction}")
    order = np.random.default_rng(seed).permutation(len(manifest.items))
    n_train = max(1, int(round(fraction * len(order)))) if len(order) else 0
    pick = lambda idx: [manifest.items[i] for i in sorted(idx)]
    return (
        DatasetManifest(manifest.root, manifest.class_names, pick(order[:n_train])),
        DatasetManifest(manifest.root, manifest.class_names, pick(order[n_train:])),
    )


# -- corner-format conversion -------------------------------------------------

@dataclass(frozen=True)
class CornerRecord:
    filename: str
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float


@dataclass(frozen=True)
class ConversionError:
    index: int
    filename: str
    message: str

    def __str__(self):
        return f"record {self.index} ({self.filename}): {self.message}"


def convert_corner_dataset(records: Sequence[CornerRecord], image_sizes: dict, root, class_names):
    """Turn pixel corner boxes into normalized labels.

    ``image_sizes`` maps filename -> (width, height). Images listed there with
    no records become background images. Returns ``(manifest, errors)``; a
    bad record is reported and skipped while the rest are converted.
    """
    root = Path(root)
    per_image: dict = {}
    errors = []
    for index, rec in enumerate(records):
        size = image_sizes.get(rec.filename)
        if size is None:
            errors.append(ConversionError(index, rec.filename, "missing image dimensions"))
            continue
        w, h = size
        try:
            if not 0 <= rec.class_id < len(class_names):
                raise ValidationError(f"class id {rec.class_id} outside [0, {len(class_names)})")
            corner = CornerBox(rec.x_min, rec.y_min, rec.x_max, rec.y_max).clip(w, h)
            box = corner_to_center(corner, w, h)
        except ValidationError as exc:
            errors.append(ConversionError(index, rec.filename, str(exc)))
            continue
        per_image.setdefault(rec.filename, []).append(Annotation(rec.class_id, box))

    items = []
    for name in sorted(set(per_image) | set(image_sizes)):
        if name not in image_sizes:
            continue
        w, h = image_sizes[name]
        items.append(LabeledImage(root / "images" / name, int(w), int(h), per_image.get(name, [])))
    for err in errors:
        log.warning("conversion error: %s", err)
    return DatasetManifest(root, list(class_names), items), errors
