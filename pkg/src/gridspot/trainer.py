"""SGD training loop: momentum, weight decay, multiscale letterboxed inputs."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .anchors import AnchorSet, kmeans_anchors, write_anchors
from .dataset import Annotation, DatasetManifest, load_image
from .errors import ConfigError, NumericError, ParseError
from .geometry import CenterBox
from .network.head import assign_targets, detection_loss, stack_targets
from .network.model import Network, NetworkConfig, save_checkpoint

log = logging.getLogger(__name__)

PAD_VALUE = 0.5
DEFAULT_SCALES = tuple(range(320, 513, 32))


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    multiscale_period: int = 10          # 0 disables multiscale
    scale_set: tuple = DEFAULT_SCALES
    seed: int = 0
    lr_steps: tuple = ()                 # epochs at which lr is multiplied by 0.1
    warmup_steps: int = 0                # linear lr ramp over the first optimizer steps
    grad_clip: float = 0.0               # max global gradient L2 norm; 0 disables
    augment: bool = False
    checkpoint_every: int = 10
    precision: str = "float32"           # arithmetic for training; checkpoints are float64
    threads: int = 1

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.multiscale_period < 0:
            raise ConfigError("multiscale_period must be >= 0")
        if not self.scale_set or any(s <= 0 or s % 16 for s in self.scale_set):
            raise ConfigError(f"every scale must be a positive multiple of 16, got {self.scale_set}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not self.grad_clip >= 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.checkpoint_every < 0 or self.threads < 1:
            raise ConfigError("checkpoint_every must be >= 0 and threads >= 1")
        return self


def _coerce(name, text, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    return type(default)(text.strip())


def parse_config_text(text, source=None):
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", lineno, source)
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_train_config(path, **overrides):
    """TrainConfig from a key=value file; keyword overrides win over the file."""
    raw = parse_config_text(Path(path).read_text(encoding="utf-8"), source=path)
    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for key, text in raw.items():
        if key not in known:
            raise ParseError(f"unknown key {key!r}", source=path)
        try:
            values[key] = _coerce(key, text, getattr(defaults, key))
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", source=path) from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values).validate()


def format_train_config(config: TrainConfig):
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}\n")
    return "".join(lines)


# -- optimisation ----------------------------------------------------------------

def sgd_step(params, grads, velocity, learning_rate, momentum=0.9, weight_decay=0.0, decayed=None):
    """One momentum-SGD update, in place.

    v <- momentum * v - lr * (g + weight_decay * p);  p <- p + v
    Weight decay applies only to keys in ``decayed`` (all keys when None).
    A non-finite gradient aborts the whole step before anything is modified.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}; step aborted")
    for key, p in params.items():
        g = grads[key]
        if weight_decay and (decayed is None or key in decayed):
            g = g + weight_decay * p
        v = velocity.get(key)
        if v is None:
            v = velocity[key] = np.zeros_like(p)
        v *= momentum
        v -= learning_rate * g
        p += v
    return params, velocity


def learning_rate_at(config: TrainConfig, epoch, step=None):
    """Step-decayed rate for ``epoch``; ``step`` (0-based update count) applies the warmup ramp."""
    drops = sum(1 for s in config.lr_steps if epoch >= s)
    lr = config.learning_rate * (0.1 ** drops)
    if step is not None and step < config.warmup_steps:
        lr *= (step + 1) / config.warmup_steps
    return lr


def scale_schedule(config: TrainConfig, initial_size):
    """Input size for every epoch (index 0 = epoch 1).

    The size is re-drawn from ``scale_set`` at epochs 1 + k * period, always
    picking a different size than the current one when the set allows it.
    """
    rng = np.random.default_rng([config.seed, 1])
    sizes = []
    current = initial_size
    period = config.multiscale_period
    choices = sorted(set(config.scale_set))
    for epoch in range(1, config.epochs + 1):
        if period and epoch > 1 and (epoch - 1) % period == 0:
            options = [s for s in choices if s != current] or choices
            current = int(options[int(rng.integers(len(options)))])
        sizes.append(current)
    return sizes


# -- letterboxing ----------------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    """Mapping from source pixels to a padded square network input."""

    scale_x: float
    scale_y: float
    pad_x: float
    pad_y: float
    size: int
    src_w: int
    src_h: int

    def to_input(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return xy * np.array([self.scale_x, self.scale_y]) + np.array([self.pad_x, self.pad_y])

    def to_source(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.array([self.pad_x, self.pad_y])) / np.array([self.scale_x, self.scale_y])


def letterbox(pixels, size, scale=None):
    """Resize planar pixels keeping aspect ratio and pad to ``size`` x ``size`` with gray.

    ``scale`` defaults to the largest factor that fits the image.
    """
    _, h, w = pixels.shape
    if scale is None:
        scale = min(size / w, size / h)
    new_w = max(1, min(size, int(round(w * scale))))
    new_h = max(1, min(size, int(round(h * scale))))
    pad_x, pad_y = (size - new_w) // 2, (size - new_h) // 2
    if new_w == w and new_h == h:
        resized = pixels
    else:
        resized = np.stack([
            np.asarray(Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32), "F").resize(
                (new_w, new_h), Image.BILINEAR))
            for ch in pixels])
    out = np.full((pixels.shape[0], size, size), PAD_VALUE, dtype=np.float32)
    out[:, pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resized
    return out, Letterbox(new_w / w, new_h / h, float(pad_x), float(pad_y), size, w, h)


def letterbox_annotations(annotations, box: Letterbox):
    """Re-express normalized source annotations in the letterboxed input frame."""
    out = []
    for ann in annotations:
        b = ann.box
        cx, cy = box.to_input([b.x * box.src_w, b.y * box.src_h])
        w, h = b.w * box.src_w * box.scale_x, b.h * box.src_h * box.scale_y
        out.append(Annotation(ann.class_id, CenterBox(cx / box.size, cy / box.size, w / box.size, h / box.size)))
    return out


def _augment(pixels, annotations, rng):
    if rng.random() < 0.5:
        pixels = pixels[:, :, ::-1]
        annotations = [Annotation(a.class_id, CenterBox(1 - a.box.x, a.box.y, a.box.w, a.box.h))
                       for a in annotations]
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1, :]
        annotations = [Annotation(a.class_id, CenterBox(a.box.x, 1 - a.box.y, a.box.w, a.box.h))
                       for a in annotations]
    gain = np.float32(rng.uniform(0.8, 1.2))
    return np.clip(np.ascontiguousarray(pixels) * gain, 0, 1), annotations


# -- the loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    network: Network
    losses: list = field(default_factory=list)          # (epoch, mean loss, input size)
    checkpoints: list = field(default_factory=list)
    stopped_early: bool = False


class TrainingHalted(NumericError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def anchors_from_manifest(manifest: DatasetManifest, B, seed=0):
    shapes = [(a.box.w, a.box.h) for item in manifest.items for a in item.annotations]
    return kmeans_anchors(np.array(shapes, dtype=np.float64).reshape(-1, 2), B, seed)


class _ImageCache:
    """Decoded images and per-size letterboxed copies, built on demand."""

    def __init__(self, manifest, threads=1):
        self.items = manifest.items
        self.threads = threads
        self.raw = {}
        self.boxed = {}

    def _load(self, idx):
        if idx not in self.raw:
            self.raw[idx] = load_image(self.items[idx].image_path)
        return self.raw[idx]

    def _boxed(self, idx, size):
        key = (idx, size)
        if key not in self.boxed:
            pixels, lb = letterbox(self._load(idx), size)
            self.boxed[key] = (pixels, letterbox_annotations(self.items[idx].annotations, lb))
        return self.boxed[key]

    def batch(self, indices, size):
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(lambda i: self._boxed(i, size), indices))   # map keeps order
        return [self._boxed(i, size) for i in indices]

    def drop_size(self, keep):
        self.boxed = {k: v for k, v in self.boxed.items() if k[1] == keep}


def write_loss_csv(path, losses):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss, _ in losses:
            writer.writerow([epoch, repr(float(loss))])


def clip_gradients(grads, max_norm):
    """Scale every gradient in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def train(manifest: DatasetManifest, net_config: NetworkConfig, config: TrainConfig,
          anchors: AnchorSet = None, out_dir=None, callback=None) -> TrainResult:
    """Train a fresh network on ``manifest``.

    ``callback(epoch, network, loss)`` runs after every epoch; returning True
    stops training (the final checkpoint is still written).
    """
    config.validate()
    if len(manifest) == 0:
        raise ConfigError("training manifest is empty")
    if anchors is None:
        anchors = anchors_from_manifest(manifest, net_config.num_anchors, config.seed)
    dtype = np.float32 if config.precision == "float32" else np.float64
    net = Network(net_config, anchors, seed=config.seed, dtype=dtype)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_anchors(out_dir / "anchors.txt", anchors)

    result = TrainResult(net)
    rng = np.random.default_rng([config.seed, 0])
    aug_rng = np.random.default_rng([config.seed, 2])
    sizes = scale_schedule(config, net_config.input_size)
    cache = _ImageCache(manifest, config.threads)
    velocity = {}
    decayed = net.decayed_keys()
    n = len(manifest)
    last_good = None
    step = 0

    def checkpoint(epoch, name=None):
        if out_dir is None:
            return None
        path = out_dir / (name or f"epoch_{epoch:04d}.ckpt")
        save_checkpoint(path, net, epoch, extra={"class_names": list(manifest.class_names)})
        result.checkpoints.append(path)
        return path

    epoch = 0
    for epoch in range(1, config.epochs + 1):
        size = sizes[epoch - 1]
        if size != net.input_size:
            log.info("epoch %d: input size %d -> %d", epoch, net.input_size, size)
            cache.drop_size(size)
        net.set_input_size(size)
        S = net.grid_for(size)
        lr = learning_rate_at(config, epoch)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) == 0:
                log.warning("epoch %d: empty batch skipped", epoch)
                continue
            batch = cache.batch([int(i) for i in idx], size)
            pixels = [b[0] for b in batch]
            anns = [b[1] for b in batch]
            if config.augment:
                pairs = [_augment(p, a, aug_rng) for p, a in zip(pixels, anns)]
                pixels, anns = [p for p, _ in pairs], [a for _, a in pairs]
            images = np.stack(pixels)
            targets = stack_targets([assign_targets(a, anchors, S, net_config.num_classes) for a in anns])
            try:
                pred = net.forward(images, mode="train")
                loss, grad = detection_loss(pred, targets, anchors.priors)
                grads = net.backward(grad)
                if config.grad_clip:
                    clip_gradients(grads, config.grad_clip)
                sgd_step(net.parameters(), grads, velocity, learning_rate_at(config, epoch, step),
                         config.momentum, config.weight_decay, decayed)
            except NumericError as exc:
                path = None
                if out_dir is not None and last_good is not None:
                    net.load_state_arrays(last_good)
                    path = checkpoint(epoch - 1, "last_good.ckpt")
                raise TrainingHalted(f"epoch {epoch}: {exc}", path) from exc
            batch_losses.append(loss)
            step += 1
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        result.losses.append((epoch, epoch_loss, size))
        log.info("epoch %d loss %.6f size %d lr %g", epoch, epoch_loss, size, lr)
        last_good = [v.copy() for _, v in net.state_arrays()]
        stop = bool(callback(epoch, net, epoch_loss)) if callback is not None else False
        if stop:
            result.stopped_early = True
            break
        if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch != config.epochs:
            checkpoint(epoch)

    net.set_input_size(net_config.input_size)
    checkpoint(epoch, "final.ckpt")
    if out_dir is not None:
        write_loss_csv(out_dir / "loss.csv", result.losses)
    return result
