"""Network configuration, assembly and weight checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..anchors import AnchorSet
from ..errors import ConfigError, StateError, ValidationError
from .layers import BatchNorm, Conv2D, LeakyReLU, MaxPool

DOWNSAMPLE = 16


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv | bn | leaky | maxpool | head
    out: int = 0              # conv output channels
    kernel: int = 3
    stride: int = 1
    size: int = 2             # maxpool window
    slope: float = 0.1        # leaky
    bias: bool = False        # conv bias (head convs always have one)


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    input_size: int = 416
    num_anchors: int = 5
    num_classes: int = 1
    in_channels: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    @property
    def head_channels(self):
        return self.num_anchors * (5 + self.num_classes)

    @property
    def grid_size(self):
        return self.input_size // DOWNSAMPLE

    def downsample(self):
        factor = 1
        for spec in self.layers:
            if spec.kind == "maxpool":
                factor *= spec.size
            elif spec.kind in ("conv", "head"):
                factor *= spec.stride
        return factor

    def validate(self):
        if self.num_anchors < 1 or self.num_classes < 1:
            raise ConfigError("need at least one anchor and one class")
        if self.downsample() != DOWNSAMPLE:
            raise ConfigError(f"layers downsample by {self.downsample()}, expected {DOWNSAMPLE}")
        check_input_size(self.input_size)
        if not self.layers or self.layers[-1].kind != "head":
            raise ConfigError("the last layer must be the detection head")
        if sum(s.kind == "head" for s in self.layers) != 1:
            raise ConfigError("exactly one detection head is required")
        return self

    def with_input_size(self, size):
        return NetworkConfig(**{**self._fields(), "input_size": size})

    def _fields(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_dict(self):
        d = self._fields()
        d["layers"] = [asdict(s) for s in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**s) for s in d["layers"])
        return cls(**d)

    def hash(self):
        """Digest of everything that determines parameter shapes (not input size)."""
        d = self.to_dict()
        d.pop("input_size")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


def check_input_size(size):
    if size <= 0 or size % DOWNSAMPLE:
        raise ConfigError(f"input size must be a positive multiple of {DOWNSAMPLE}, got {size}")


def _conv_block(out, kernel=3, slope=0.1):
    return [LayerSpec("conv", out=out, kernel=kernel), LayerSpec("bn"), LayerSpec("leaky", slope=slope)]


def tiny16(input_size=416, num_anchors=5, num_classes=1, widths=(16, 32, 64, 64, 128, 128, 256)):
    """Seven 3x3 conv blocks, pools after the first four, then a 1x1 head."""
    layers = []
    for i, w in enumerate(widths):
        layers += _conv_block(w)
        if i < 4:
            layers.append(LayerSpec("maxpool", size=2))
    layers.append(LayerSpec("head", kernel=1, bias=True))
    return NetworkConfig(tuple(layers), input_size, num_anchors, num_classes).validate()


def toy_config(input_size=32, num_anchors=2, num_classes=1, widths=(4, 6)):
    """Two conv blocks with 4x4 pools (downsample 16) for gradient checks."""
    layers = []
    for w in widths:
        layers += _conv_block(w)
        layers.append(LayerSpec("maxpool", size=4))
    layers.append(LayerSpec("head", kernel=1, bias=True))
    return NetworkConfig(tuple(layers), input_size, num_anchors, num_classes).validate()


class Network:
    """Backbone plus detection head.

    Output of :meth:`forward` has shape (N, S, S, B, 5 + C) holding the raw
    values t_x, t_y, t_w, t_h, t_o and the class logits for every anchor.
    """

    def __init__(self, config: NetworkConfig, anchors: AnchorSet, seed=0, dtype=np.float64):
        config.validate()
        if len(anchors) != config.num_anchors:
            raise ConfigError(f"{len(anchors)} anchors for a head with B={config.num_anchors}")
        self.config = config
        self.anchors = anchors
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        ch = config.in_channels
        for spec in config.layers:
            if spec.kind == "conv":
                layer = Conv2D(ch, spec.out, spec.kernel, spec.stride, bias=spec.bias, rng=rng, dtype=dtype)
                ch = spec.out
            elif spec.kind == "head":
                layer = Conv2D(ch, config.head_channels, spec.kernel, spec.stride, bias=True, rng=rng, dtype=dtype)
                ch = config.head_channels
            elif spec.kind == "bn":
                layer = BatchNorm(ch, config.bn_eps, config.bn_momentum, dtype=dtype)
            elif spec.kind == "leaky":
                layer = LeakyReLU(spec.slope)
            elif spec.kind == "maxpool":
                layer = MaxPool(spec.size)
            else:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            self.layers.append(layer)
        self.input_size = config.input_size
        self._forwarded = False

    # -- shapes --------------------------------------------------------------

    def grid_for(self, size):
        check_input_size(size)
        h = w = size
        c = self.config.in_channels
        for layer in self.layers:
            h, w, c = layer.out_shape(h, w, c)
        return h

    def _check_input(self, images):
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ConfigError(f"expected (N, {self.config.in_channels}, H, W) images, got {images.shape}")
        n, _, h, w = images.shape
        if h != w:
            raise ConfigError(f"images must be square, got {h}x{w}")
        check_input_size(h)

    # -- passes ----------------------------------------------------------------

    def forward(self, images, mode="train"):
        """Run planar (N, C, H, W) images of side ``self.input_size`` through the network."""
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        images = np.asarray(images)
        self._check_input(images)
        if images.shape[2] != self.input_size:
            raise ConfigError(f"image size {images.shape[2]} does not match network input {self.input_size}")
        train = mode == "train"
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        self._forwarded = train
        n, s = x.shape[0], x.shape[1]
        return x.reshape(n, s, s, self.config.num_anchors, 5 + self.config.num_classes)

    def predict(self, images):
        """Inference-mode forward that leaves no cached state behind."""
        return self.forward(images, mode="infer")

    def set_input_size(self, size):
        """Switch the accepted input side (multiscale training); weights are size-independent."""
        check_input_size(size)
        self.input_size = size

    def backward(self, dpred):
        """Back-propagate d(loss)/d(prediction volume); returns {name: grad}."""
        if not self._forwarded:
            raise StateError("backward requires a preceding train-mode forward")
        self._forwarded = False
        g = np.asarray(dpred, dtype=self.dtype)
        n, s = g.shape[:2]
        g = g.reshape(n, s, s, self.config.head_channels)
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g, need_input_grad=i > 0)
        return self.gradients()

    # -- parameters ------------------------------------------------------------

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out.append((f"{i}.{layer.kind}.{name}", layer, name, value))
        return out

    def parameters(self):
        return {key: value for key, _, _, value in self.named_params()}

    def gradients(self):
        return {key: layer.grads[name] for key, layer, name, _ in self.named_params()}

    def set_parameter(self, key, value):
        for k, layer, name, _ in self.named_params():
            if k == key:
                layer.params[name] = value
                return
        raise KeyError(key)

    def decayed_keys(self):
        """Parameters subject to weight decay: conv weights only."""
        return {k for k, layer, name, _ in self.named_params()
                if isinstance(layer, Conv2D) and name == "weight"}

    def state_arrays(self):
        """Every array a checkpoint stores, in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out.append((f"{i}.{layer.kind}.{name}", value))
            for name, value in layer.buffers.items():
                out.append((f"{i}.{layer.kind}.{name}", value))
        return out

    def load_state_arrays(self, arrays):
        it = iter(arrays)
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for name in store:
                    value = next(it)
                    if value.shape != store[name].shape:
                        raise ValidationError(f"checkpoint block for {name} has shape {value.shape}, "
                                              f"expected {store[name].shape}")
                    store[name] = value.astype(self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self):
        clone = Network(self.config, self.anchors, dtype=self.dtype)
        clone.load_state_arrays([v.copy() for _, v in self.state_arrays()])
        clone.input_size = self.input_size
        return clone


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"GRIDSPT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sII32sI")      # magic, version, epoch, config hash, meta length


def save_checkpoint(path, net: Network, epoch=0, extra=None):
    """Write header + meta JSON + little-endian float64 blocks in layer order."""
    meta = {
        "config": net.config.to_dict(),
        "anchors": [[float(w), float(h)] for w, h in net.anchors.priors],
    }
    if extra:
        meta.update(extra)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(epoch), net.config.hash(), len(meta_bytes)))
        fh.write(meta_bytes)
        for _, value in net.state_arrays():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64):
    """Return (network, epoch, meta) from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"{path}: truncated checkpoint header")
    magic, version, epoch, digest, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError(f"{path}: not a gridspot checkpoint")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    meta = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    config = NetworkConfig.from_dict(meta["config"])
    if config.hash() != digest:
        raise ValidationError(f"{path}: config hash mismatch")
    net = Network(config, AnchorSet(np.array(meta["anchors"])), dtype=dtype)
    arrays = []
    for _, ref in net.state_arrays():
        nbytes = ref.size * 8
        if offset + nbytes > len(data):
            raise ValidationError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(data, dtype="<f8", count=ref.size, offset=offset).reshape(ref.shape))
        offset += nbytes
    if offset != len(data):
        raise ValidationError(f"{path}: {len(data) - offset} trailing bytes")
    net.load_state_arrays(arrays)
    return net, epoch, meta
