"""Command-line entry point: convert, synth, anchors, train, detect, eval.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
Results go to files or stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import GridspotError, ParseError, ValidationError

log = logging.getLogger("gridspot")

THREADS_ENV = "GRIDSPOT_THREADS"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors raised (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _unit_float(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {value}")
    return value


def _int_list(text):
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def _common(p, threads):
    p.add_argument("--config", type=Path, help="key=value file with defaults for this subcommand's flags")
    p.add_argument("--threads", type=_positive_int, default=threads,
                   help=f"worker and BLAS thread cap (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    threads = _default_threads()
    parser = _Parser(prog="gridspot", description="Small-object detector for overhead imagery.",
                     formatter_class=_fmt)
    parser.add_argument("--version", action="version", version=f"gridspot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="pixel corner boxes (CSV) -> normalized label files", formatter_class=_fmt)
    p.add_argument("--records", type=Path, required=True,
                   help="CSV rows: filename,class_id,x_min,y_min,x_max,y_max[,width,height]")
    p.add_argument("--images", type=Path, help="directory holding the images (sizes are read from it)")
    p.add_argument("--classes", default="aircraft", help="comma-separated class names or a classes file")
    p.add_argument("--out", type=Path, required=True, help="dataset root to write")
    _common(p, threads)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=_fmt)
    p.add_argument("--out", type=Path, required=True, help="dataset root to write")
    p.add_argument("--count", type=_positive_int, default=64, help="number of images")
    p.add_argument("--width", type=_positive_int, default=416)
    p.add_argument("--height", type=_positive_int, default=416)
    p.add_argument("--min-objects", type=_non_negative_int, default=1)
    p.add_argument("--max-objects", type=_non_negative_int, default=5)
    p.add_argument("--min-size", type=_positive_int, default=8, help="smallest object span in pixels")
    p.add_argument("--max-size", type=_positive_int, default=32, help="largest object span in pixels")
    p.add_argument("--texture", type=float, default=0.15, help="background noise level")
    p.add_argument("--seed", type=int, default=0)
    _common(p, threads)

    p = sub.add_parser("anchors", help="k-means anchor priors from label files", formatter_class=_fmt)
    p.add_argument("--labels", type=Path, required=True, help="directory of label files")
    p.add_argument("--k", type=_positive_int, default=5, help="number of priors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("anchors.txt"))
    _common(p, threads)

    from .trainer import DEFAULT_SCALES, TrainConfig
    d = TrainConfig()
    p = sub.add_parser("train", help="train a detector", formatter_class=_fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset root (images/, labels/, classes.txt)")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and curves")
    p.add_argument("--anchors", type=Path, help="anchors file; computed from the training labels if omitted")
    p.add_argument("--input-size", type=_positive_int, default=416, help="network input side, multiple of 16")
    p.add_argument("--num-anchors", type=_positive_int, default=5)
    p.add_argument("--split", type=float, default=0.9, help="fraction of images used for training")
    p.add_argument("--epochs", type=_positive_int, default=d.epochs)
    p.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate, help="learning rate")
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--warmup-steps", type=_non_negative_int, default=d.warmup_steps)
    p.add_argument("--grad-clip", type=float, default=d.grad_clip,
                   help="cap on the global gradient norm (0 = off)")
    p.add_argument("--lr-steps", type=_int_list, default=d.lr_steps, help="epochs at which lr drops x0.1")
    p.add_argument("--multiscale-period", type=_non_negative_int, default=d.multiscale_period,
                   help="epochs between input-size changes (0 = fixed size)")
    p.add_argument("--scales", type=_int_list, default=DEFAULT_SCALES, help="input sizes to draw from")
    p.add_argument("--augment", action="store_true", help="random flips and brightness gain")
    p.add_argument("--checkpoint-every", type=_non_negative_int, default=d.checkpoint_every)
    p.add_argument("--precision", choices=("float32", "float64"), default=d.precision)
    p.add_argument("--seed", type=int, default=0)
    _common(p, threads)

    p = sub.add_parser("detect", help="run a trained detector on images", formatter_class=_fmt)
    p.add_argument("--weights", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path, action="append", help="image path (repeatable)")
    src.add_argument("--images", type=Path, help="directory of images")
    src.add_argument("--list", type=Path, help="text file with one image path per line")
    p.add_argument("--tile", type=_non_negative_int, default=0,
                   help="tile side in pixels; 0 letterboxes the whole image into the network")
    p.add_argument("--overlap", type=_non_negative_int, default=64, help="tile overlap in pixels")
    p.add_argument("--no-ownership", action="store_true",
                   help="keep every tile's detections and rely on global NMS alone")
    p.add_argument("--conf", type=_unit_float, default=0.25, help="score threshold")
    p.add_argument("--iou", type=_unit_float, default=0.45, help="NMS IoU threshold")
    p.add_argument("--out", type=Path, default=Path("detections.txt"))
    p.add_argument("--render", type=Path, help="directory for annotated copies of the images")
    p.add_argument("--runs", type=_positive_int, default=3, help="timed passes; FPS uses their median")
    p.add_argument("--timing", type=Path, help="write timing samples here (key=value)")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    _common(p, threads)

    p = sub.add_parser("eval", help="score detections against ground truth", formatter_class=_fmt)
    p.add_argument("--pred", type=Path, required=True, help="detections file from 'detect'")
    p.add_argument("--truth", type=Path, required=True, help="label directory or dataset root")
    p.add_argument("--images", type=Path, help="image directory (default: <truth>/../images or <truth>/images)")
    p.add_argument("--iou", type=_unit_float, default=0.5, help="match IoU threshold")
    p.add_argument("--timing", type=Path, help="timing file from 'detect' for the FPS column")
    p.add_argument("--out", type=Path, help="write key=value report here")
    p.add_argument("--figure", type=Path, help="write a summary figure (PNG) here")
    p.add_argument("--per-image", action="store_true", help="also print per-image counts")
    _common(p, threads)
    return parser


def _apply_config_file(parser, argv):
    """Parse ``argv``; if --config is given, its values become defaults that flags override."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    from .trainer import parse_config_text
    path = args.config
    if not path.is_file():
        raise UsageError(f"--config {path}: no such file")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in parse_config_text(path.read_text(encoding="utf-8"), source=path).items():
        action = actions.get(key)
        if action is None:
            raise ParseError(f"unknown key {key!r} for '{args.command}'", source=path)
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ParseError(f"{key}: not a boolean: {text!r}", source=path)
            defaults[key] = low in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(text) if action.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ParseError(f"bad value for {key}: {exc}", source=path) from None
        if action.choices is not None and value not in action.choices:
            raise ParseError(f"{key} must be one of {sorted(action.choices)}", source=path)
        if action.nargs is None and isinstance(action, argparse._AppendAction):
            value = [value]
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require_file(path, flag):
    if not Path(path).is_file():
        raise UsageError(f"{flag} {path}: no such file")


def _require_dir(path, flag):
    if not Path(path).is_dir():
        raise UsageError(f"{flag} {path}: no such directory")


# -- subcommands ----------------------------------------------------------------------

def _class_names(spec):
    path = Path(spec)
    if path.is_file():
        from .dataset import read_class_names
        return read_class_names(path)
    names = [n.strip() for n in spec.split(",") if n.strip()]
    if not names:
        raise UsageError("--classes: no class names given")
    return names


def cmd_convert(args, out):
    from .dataset import (CornerRecord, convert_corner_dataset, image_size, write_labels,
                          write_manifest)
    _require_file(args.records, "--records")
    if args.images is not None:
        _require_dir(args.images, "--images")
    names = _class_names(args.classes)
    records, sizes = [], {}
    with open(args.records, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "filename":
                continue
            if len(row) not in (6, 8):
                raise ParseError(f"expected 6 or 8 fields, got {len(row)}", lineno, args.records)
            try:
                rec = CornerRecord(row[0].strip(), int(row[1]), *(float(v) for v in row[2:6]))
                if len(row) == 8:
                    sizes.setdefault(rec.filename, (int(row[6]), int(row[7])))
            except ValueError as exc:
                raise ParseError(str(exc), lineno, args.records) from None
            records.append(rec)
    if args.images is not None:
        for img in sorted(args.images.iterdir()):
            if img.suffix.lower() in (".png", ".jpg", ".jpeg") and img.name not in sizes:
                sizes[img.name] = image_size(img)
    manifest, errors = convert_corner_dataset(records, sizes, args.out, names)
    (args.out / "images").mkdir(parents=True, exist_ok=True)
    if args.images is not None and args.images.resolve() != (args.out / "images").resolve():
        for item in manifest.items:
            src = args.images / Path(item.image_path).name
            if src.exists():
                shutil.copyfile(src, item.image_path)
    write_labels(manifest)
    write_manifest(manifest)
    for err in errors:
        print(f"convert: {err}", file=sys.stderr)
    print(f"converted {len(records) - len(errors)} of {len(records)} records into {len(manifest)} images "
          f"-> {args.out}", file=out)
    return 0


def cmd_synth(args, out):
    from .synth import SceneSpec, write_synthetic_dataset
    spec = SceneSpec(width=args.width, height=args.height, min_objects=args.min_objects,
                     max_objects=args.max_objects, min_size=args.min_size, max_size=args.max_size,
                     texture=args.texture)
    spec.validate()
    print(f"seed={args.seed}", file=sys.stderr)
    manifest = write_synthetic_dataset(args.out, args.count, spec, seed=args.seed)
    objects = sum(len(i.annotations) for i in manifest.items)
    print(f"wrote {len(manifest)} images with {objects} objects -> {args.out}", file=out)
    return 0


def _read_label_dir(label_dir):
    from .dataset import read_class_names, read_label_path
    label_dir = Path(label_dir)
    classes = None
    for cand in (label_dir / "classes.txt", label_dir.parent / "classes.txt"):
        if cand.is_file():
            classes = read_class_names(cand)
            break
    count = len(classes) if classes else 2 ** 31
    files = sorted(p for p in label_dir.glob("*.txt") if p.name != "classes.txt")
    return classes, {p.stem: read_label_path(p, count) for p in files}


def cmd_anchors(args, out):
    from .anchors import kmeans_anchors, write_anchors
    _require_dir(args.labels, "--labels")
    _, labels = _read_label_dir(args.labels)
    shapes = np.array([(a.box.w, a.box.h) for anns in labels.values() for a in anns], dtype=np.float64)
    print(f"seed={args.seed}", file=sys.stderr)
    anchors = kmeans_anchors(shapes.reshape(-1, 2), args.k, seed=args.seed)
    write_anchors(args.out, anchors)
    for w, h in anchors.priors:
        print(f"{w:.6f} {h:.6f}", file=out)
    print(f"mean_iou={anchors.mean_iou:.6f} boxes={len(shapes)} iterations={anchors.iterations}", file=out)
    return 0


def cmd_train(args, out):
    from .anchors import read_anchors
    from .dataset import read_manifest, split_manifest
    from .network.model import check_input_size, tiny16
    from .plotting import plot_loss_curve
    from .trainer import TrainConfig, format_train_config, train

    _require_dir(args.data, "--data")
    if args.anchors is not None:
        _require_file(args.anchors, "--anchors")
    if not 0.0 < args.split <= 1.0:
        raise UsageError(f"--split must be in (0, 1], got {args.split}")
    check_input_size(args.input_size)
    config = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
                         weight_decay=args.weight_decay, epochs=args.epochs,
                         multiscale_period=args.multiscale_period, scale_set=tuple(args.scales),
                         seed=args.seed, lr_steps=tuple(args.lr_steps), warmup_steps=args.warmup_steps,
                         grad_clip=args.grad_clip,
                         augment=args.augment, checkpoint_every=args.checkpoint_every,
                         precision=args.precision, threads=args.threads).validate()
    manifest = read_manifest(args.data)
    train_set, holdout = split_manifest(manifest, args.split, args.seed)
    anchors = read_anchors(args.anchors) if args.anchors is not None else None
    net_config = tiny16(args.input_size, args.num_anchors, manifest.class_count)
    if anchors is not None and len(anchors) != args.num_anchors:
        raise UsageError(f"--anchors has {len(anchors)} priors but --num-anchors is {args.num_anchors}")

    print(f"seed={args.seed}", file=sys.stderr)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train_config.txt").write_text(format_train_config(config), encoding="utf-8")
    (args.out / "holdout.txt").write_text(
        "".join(Path(i.image_path).name + "\n" for i in holdout.items), encoding="utf-8")

    def progress(epoch, net, loss):
        print(f"epoch {epoch} loss {loss:.6f} size {net.input_size}", file=sys.stderr)

    result = train(train_set, net_config, config, anchors=anchors, out_dir=args.out, callback=progress)
    plot_loss_curve(result.losses, args.out / "loss.png")
    print(f"trained {len(result.losses)} epochs on {len(train_set)} images; "
          f"final loss {result.losses[-1][1]:.6f} -> {args.out / 'final.ckpt'}", file=out)
    return 0


def _image_list(args):
    from .dataset import IMAGE_SUFFIXES
    if args.image:
        paths = list(args.image)
    elif args.images is not None:
        _require_dir(args.images, "--images")
        paths = sorted(p for p in args.images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        _require_file(args.list, "--list")
        base = args.list.parent
        paths = []
        for line in args.list.read_text(encoding="utf-8").splitlines():
            if line.strip():
                p = Path(line.strip())
                paths.append(p if p.is_absolute() else base / p)
    for p in paths:
        _require_file(p, "image")
    if not paths:
        raise UsageError("no images to process")
    return paths


def render_detections(pixels, dets, path, class_names):
    """Burn boxes and scores into a copy of the image."""
    from PIL import Image, ImageDraw
    _, h, w = pixels.shape
    arr = np.clip(pixels.transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    im = Image.fromarray(arr, "RGB")
    draw = ImageDraw.Draw(im)
    for d in dets:
        c = d.corners(w, h)
        draw.rectangle([c.x_min, c.y_min, c.x_max - 1, c.y_max - 1], outline=(255, 40, 40), width=2)
        name = class_names[d.class_id] if d.class_id < len(class_names) else str(d.class_id)
        draw.text((c.x_min, max(0.0, c.y_min - 11)), f"{name} {d.score:.2f}", fill=(255, 255, 0))
    im.save(path)


def cmd_detect(args, out):
    from .dataset import load_image
    from .inference import detect_image, detect_tiled, format_detections, plan_tiles, timed_runs
    from .network.model import load_checkpoint

    _require_file(args.weights, "--weights")
    paths = _image_list(args)
    if args.tile and args.overlap >= args.tile:
        raise UsageError(f"--overlap {args.overlap} must be smaller than --tile {args.tile}")
    dtype = np.float32 if args.precision == "float32" else np.float64
    net, _, meta = load_checkpoint(args.weights, dtype=dtype)
    class_names = meta.get("class_names") or [str(i) for i in range(net.config.num_classes)]

    images = [load_image(p) for p in paths]
    plans = [plan_tiles(px.shape[2], px.shape[1], args.tile, args.overlap) if args.tile else None
             for px in images]

    def run_all():
        results = []
        for px, plan in zip(images, plans):
            if plan is None:
                results.append(detect_image(net, px, args.conf, args.iou))
            else:
                results.append(detect_tiled(net, px, plan, args.conf, args.iou, threads=args.threads,
                                            ownership=not args.no_ownership))
        return results

    results, seconds = timed_runs(run_all, args.runs)
    text = "".join(format_detections(p.name, dets, px.shape[2], px.shape[1], class_names)
                   for p, px, dets in zip(paths, images, results))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    if args.render is not None:
        args.render.mkdir(parents=True, exist_ok=True)
        for p, px, dets in zip(paths, images, results):
            render_detections(px, dets, args.render / f"{p.stem}_det.png", class_names)
    median = float(np.median(seconds))
    fps = len(images) / median if median > 0 else float("inf")
    if args.timing is not None:
        args.timing.write_text(f"images={len(images)}\nruns={len(seconds)}\n"
                               + "".join(f"seconds={s:.6f}\n" for s in seconds), encoding="utf-8")
    count = sum(len(r) for r in results)
    print(f"{count} detections in {len(images)} images -> {args.out}", file=out)
    print(f"fps={fps:.3f} (median of {len(seconds)} runs, inference only)", file=sys.stderr)
    return 0


def read_timing(path):
    images, seconds = None, []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        try:
            if key == "images":
                images = int(value)
            elif key == "seconds":
                seconds.append(float(value))
        except ValueError:
            raise ParseError(f"bad value {value!r}", lineno, path) from None
    if images is None or not seconds:
        raise ParseError("timing file needs images= and seconds= lines", source=path)
    return images, seconds


def cmd_eval(args, out):
    from .dataset import IMAGE_SUFFIXES, image_size
    from .evaluation import evaluate, format_report_kv, format_report_table
    from .geometry import center_to_corner
    from .inference import read_detections
    from .plotting import plot_report

    _require_file(args.pred, "--pred")
    _require_dir(args.truth, "--truth")
    label_dir = args.truth / "labels" if (args.truth / "labels").is_dir() else args.truth
    image_dir = args.images
    if image_dir is None:
        for cand in (args.truth / "images", label_dir.parent / "images"):
            if cand.is_dir():
                image_dir = cand
                break
    if image_dir is None:
        raise UsageError("--images is required when it cannot be found next to --truth")
    _require_dir(image_dir, "--images")
    if args.timing is not None:
        _require_file(args.timing, "--timing")

    classes, labels = _read_label_dir(label_dir)
    index = {}
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem in labels:
            index.setdefault(p.stem, p)
    records = read_detections(args.pred)
    names = {}
    if classes:
        names = {n: i for i, n in enumerate(classes)}
    by_image = {}
    for r in records:
        stem = Path(r.image).stem
        if stem not in labels:
            raise ValidationError(f"{args.pred}: detection for {r.image} has no label file in {label_dir}")
        if r.class_name in names:
            cls = names[r.class_name]
        else:
            try:
                cls = int(r.class_name)
            except ValueError:
                raise ValidationError(f"{args.pred}: unknown class {r.class_name!r}") from None
        by_image.setdefault(stem, []).append((cls, r.score, r.box.as_array()))

    rows = []
    for stem in sorted(labels):
        if stem not in index:
            raise ValidationError(f"no image for label file {stem}.txt in {image_dir}")
        w, h = image_size(index[stem])
        truths = [(a.class_id, center_to_corner(a.box, w, h).as_array()) for a in labels[stem]]
        rows.append((index[stem].name, by_image.get(stem, []), truths))
    seconds = None
    if args.timing is not None:
        timed_images, seconds = read_timing(args.timing)
        seconds = [s * len(rows) / timed_images for s in seconds]
    report = evaluate(rows, args.iou, seconds)

    out.write(format_report_table(report))
    if args.per_image:
        for name, tp, fp, fn in report.per_image:
            out.write(f"{name} tp={tp} fp={fp} fn={fn}\n")
    if args.out is not None:
        args.out.write_text(format_report_kv(report), encoding="utf-8")
    if args.figure is not None:
        plot_report(report, args.figure)
    return 0


COMMANDS = {"convert": cmd_convert, "synth": cmd_synth, "anchors": cmd_anchors,
            "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval}


def run(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        parser = build_parser()
        args = _apply_config_file(parser, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GridspotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
