"""Shared test utilities: finite differences and small fixtures."""
import numpy as np

from gridspot.anchors import AnchorSet
from gridspot.dataset import Annotation
from gridspot.geometry import CenterBox

FD_STEP = 1e-4


def rel_error(analytic, numeric):
    """Max |a - n| scaled by the largest magnitude in either array."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        plus = f()
        x[idx] = orig - step
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def toy_anchors():
    return AnchorSet(np.array([[0.1, 0.1], [0.3, 0.2]]))


def ann(x, y, w, h, c=0):
    return Annotation(c, CenterBox(x, y, w, h))
