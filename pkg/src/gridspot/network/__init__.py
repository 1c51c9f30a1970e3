from .head import Targets, assign_targets, decode_boxes, detection_loss, sigmoid, stack_targets
from .layers import BatchNorm, Conv2D, LeakyReLU, MaxPool
from .model import (LayerSpec, Network, NetworkConfig, load_checkpoint, save_checkpoint, tiny16,
                    toy_config)

__all__ = [
    "BatchNorm", "Conv2D", "LayerSpec", "LeakyReLU", "MaxPool", "Network", "NetworkConfig",
    "Targets", "assign_targets", "decode_boxes", "detection_loss", "load_checkpoint",
    "save_checkpoint", "sigmoid", "stack_targets", "tiny16", "toy_config",
]
