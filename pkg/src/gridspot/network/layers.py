"""Layers with explicit forward/backward passes.

Activations are NHWC. Each layer keeps what backward needs from the last
train-mode forward; ``forward(..., train=False)`` caches nothing, so a
network can serve concurrent read-only inference.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, StateError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}     # non-trainable state saved in checkpoints
        self._cache = None

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout, need_input_grad=True):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def out_shape(self, h, w, c):
        return h, w, c

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        return self


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=None, bias=True, rng=None,
                 dtype=np.float64):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError(f"conv kernel/stride must be >= 1, got {kernel}/{stride}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        rng = np.random.default_rng(0) if rng is None else rng
        limit = np.sqrt(2.0 / (kernel * kernel * in_ch))
        self.params["weight"] = rng.uniform(-limit, limit, (kernel, kernel, in_ch, out_ch)).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def out_shape(self, h, w, c):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, self.out_ch

    def _columns(self, x):
        k, s, p = self.kernel, self.stride, self.pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]   # N,Ho,Wo,C,k,k
        n, ho, wo = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * x.shape[3])
        return cols, (n, ho, wo)

    def forward(self, x, train=True):
        if x.shape[3] != self.in_ch:
            raise ConfigError(f"conv expects {self.in_ch} channels, got {x.shape[3]}")
        w = self.params["weight"]
        cols, (n, ho, wo) = self._columns(x.astype(w.dtype, copy=False))
        out = cols @ w.reshape(-1, self.out_ch)
        if "bias" in self.params:
            out += self.params["bias"]
        if train:
            self._cache = (cols, x.shape)
        return out.reshape(n, ho, wo, self.out_ch)

    def backward(self, dout, need_input_grad=True):
        cols, in_shape = self._take_cache()
        w = self.params["weight"]
        g = dout.reshape(-1, self.out_ch)
        self.grads["weight"] = (cols.T @ g).reshape(w.shape)
        if "bias" in self.params:
            self.grads["bias"] = g.sum(axis=0)
        if not need_input_grad:
            return None
        k, s, p = self.kernel, self.stride, self.pad
        n, h, wd, c = in_shape
        ho, wo = dout.shape[1:3]
        dcols = (g @ w.reshape(-1, self.out_ch).T).reshape(n, ho, wo, k, k, c)
        dx = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dcols.dtype)
        for dy in range(k):
            for dxo in range(k):
                dx[:, dy:dy + s * (ho - 1) + 1:s, dxo:dxo + s * (wo - 1) + 1:s, :] += dcols[:, :, :, dy, dxo, :]
        if p:
            dx = dx[:, p:p + h, p:p + wd, :]
        return dx


class BatchNorm(Layer):
    """Per-channel normalisation; batch statistics in train mode, running ones otherwise."""

    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ConfigError("batch-norm epsilon must be > 0")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=True):
        gamma, beta = self.params["gamma"], self.params["beta"]
        x2 = x.reshape(-1, self.channels)
        if not train:
            scale = gamma / np.sqrt(self.buffers["running_var"] + self.eps)
            out = x2 * scale
            out += beta - self.buffers["running_mean"] * scale
            return out.reshape(x.shape)
        m = x2.shape[0]
        ones = np.ones(m, dtype=x2.dtype)
        mean = (ones @ x2) / m
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat *= inv
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = self.momentum
        self.buffers["running_mean"] = mom * self.buffers["running_mean"] + (1 - mom) * mean
        self.buffers["running_var"] = mom * self.buffers["running_var"] + (1 - mom) * unbiased
        self._cache = (xhat, inv, x.shape)
        out = xhat * gamma
        out += beta
        return out.reshape(x.shape)

    def backward(self, dout, need_input_grad=True):
        xhat, inv, shape = self._take_cache()
        g = dout.reshape(-1, self.channels)
        m = g.shape[0]
        dbeta = np.ones(m, dtype=g.dtype) @ g
        dgamma = np.einsum("ij,ij->j", g, xhat)
        self.grads["gamma"], self.grads["beta"] = dgamma, dbeta
        if not need_input_grad:
            return None
        scale = self.params["gamma"] * inv
        # dx = gamma*inv/m * (m*g - sum(g) - xhat*sum(g*xhat))
        dx = g - dbeta / m
        dx -= xhat * (dgamma / m)
        dx *= scale
        return dx.reshape(shape)


class LeakyReLU(Layer):
    kind = "leaky"

    def __init__(self, slope=0.1):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        slope = x.dtype.type(self.slope)
        if train:
            # local slope per element: 1 where x > 0, ``slope`` elsewhere
            factor = (x > 0).astype(x.dtype)
            factor *= 1 - slope
            factor += slope
            self._cache = factor
            return x * factor
        out = x * slope
        return np.maximum(x, out, out=out) if self.slope <= 1 else np.where(x > 0, x, out)

    def backward(self, dout, need_input_grad=True):
        return dout * self._take_cache()


class MaxPool(Layer):
    """Non-overlapping max pooling (window == stride); ties go to the first element."""

    kind = "maxpool"

    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ConfigError(f"pool size must be >= 1, got {size}")
        self.size = size

    def out_shape(self, h, w, c):
        if h % self.size or w % self.size:
            raise ConfigError(f"input {h}x{w} not divisible by pool size {self.size}")
        return h // self.size, w // self.size, c

    def _windows(self, x):
        n, h, w, c = x.shape
        self.out_shape(h, w, c)
        s = self.size
        return x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(
            n, h // s, w // s, c, s * s)

    def forward(self, x, train=True):
        if self.size == 2:
            return self._forward2(x, train)
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = ("generic", idx.astype(np.uint16), x.shape)
        return out

    def _forward2(self, x, train):
        n, h, w, c = x.shape
        self.out_shape(h, w, c)
        r = x.reshape(n, h // 2, 2, w // 2, 2 * c)
        a, b = r[:, :, 0, :, :c], r[:, :, 0, :, c:]
        d, e = r[:, :, 1, :, :c], r[:, :, 1, :, c:]
        right_top = b > a                 # strict: ties go to the earlier element
        right_bot = e > d
        top = np.maximum(a, b)
        bot = np.maximum(d, e)
        lower = bot > top
        if train:
            self._cache = ("two", (right_top, right_bot, lower), x.shape)
        return np.maximum(top, bot, out=top)

    def backward(self, dout, need_input_grad=True):
        mode, state, shape = self._take_cache()
        n, h, w, c = shape
        if mode == "two":
            right_top, right_bot, lower = state
            g_bot = dout * lower
            g_top = dout - g_bot
            dx = np.empty((n, h // 2, 2, w // 2, 2 * c), dtype=dout.dtype)
            gb = g_top * right_top
            dx[:, :, 0, :, c:] = gb
            dx[:, :, 0, :, :c] = g_top - gb
            gb = g_bot * right_bot
            dx[:, :, 1, :, c:] = gb
            dx[:, :, 1, :, :c] = g_bot - gb
            return dx.reshape(shape)
        idx = state
        s = self.size
        dwin = np.zeros(dout.shape + (s * s,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
        return dwin.reshape(n, h // s, w // s, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
