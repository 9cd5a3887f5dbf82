"""Dense / convolution / activation / pooling layers with hand-coded backprop.

The layer set is deliberately small (enough for MLPs and Lenet5-class CNNs)
and every backward pass is written out explicitly; the test suite certifies
each one against central finite differences.  All math is float64 and every
reduction has a fixed order, so training is bitwise reproducible on a given
platform.

Layer protocol: ``params()`` returns the trainable arrays by name,
``forward(x, ctx)`` computes the output and stashes whatever backward needs
into the ``ctx`` dict (pass ``ctx=None`` for inference), and
``backward(ctx, grad_out)`` returns ``(grad_in, {name: grad})``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shape inconsistent with a layer's declared geometry."""


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-uniform weight init for ReLU nets: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def bias_uniform(rng: np.random.Generator, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


class Dense:
    """Affine map: y = x @ weights.T + bias, weights shaped [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weights = kaiming_uniform(rng, (out_dim, in_dim), fan_in=in_dim)
        self.bias = bias_uniform(rng, out_dim, fan_in=in_dim)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, ctx=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"Dense expects (batch, {self.in_dim}), got {x.shape}")
        if ctx is not None:
            ctx["x"] = x
        return x @ self.weights.T + self.bias

    def backward(self, ctx, grad_out):
        x = ctx["x"]
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        grad_in = grad_out @ self.weights
        return grad_in, {"weights": grad_w, "bias": grad_b}

    def output_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise ShapeError(f"Dense({self.in_dim}->{self.out_dim}) got input {in_shape}")
        return (self.out_dim,)


class Conv2d:
    """2-D cross-correlation with square kernels, via im2col matmuls.

    ``filters`` is shaped [out_ch, in_ch, kh, kw].
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        if stride < 1 or padding < 0:
            raise ShapeError("Conv2d: stride must be >= 1 and padding >= 0")
        fan_in = in_channels * kernel_size * kernel_size
        self.filters = kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in=fan_in
        )
        self.bias = bias_uniform(rng, out_channels, fan_in=fan_in)
        self.stride = stride
        self.padding = padding

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def out_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.filters.shape[2]

    def params(self):
        return {"filters": self.filters, "bias": self.bias}

    def _geometry(self, h: int, w: int):
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"Conv2d kernel {k} exceeds padded input {h+2*p}x{w+2*p}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, ctx=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"Conv2d expects (batch, {self.in_channels}, h, w), got {x.shape}"
            )
        n, _, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        oh, ow = self._geometry(h, w)
        if p > 0:
            x_pad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        else:
            x_pad = x
        windows = sliding_window_view(x_pad, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * oh * ow, self.in_channels * k * k
        )
        out_flat = col @ self.filters.reshape(self.out_channels, -1).T + self.bias
        out = out_flat.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        if ctx is not None:
            ctx["col"] = col
            ctx["x_shape"] = x.shape
        return out

    def backward(self, ctx, grad_out):
        col = ctx["col"]
        n, c, h, w = ctx["x_shape"]
        k, s, p = self.kernel_size, self.stride, self.padding
        oh, ow = self._geometry(h, w)

        g_flat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(
            n * oh * ow, self.out_channels
        )
        grad_w = (g_flat.T @ col).reshape(self.filters.shape)
        grad_b = g_flat.sum(axis=0)

        grad_col = (g_flat @ self.filters.reshape(self.out_channels, -1)).reshape(
            n, oh, ow, c, k, k
        )
        grad_pad = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                grad_pad[:, :, i : i + s * oh : s, j : j + s * ow : s] += grad_col[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        grad_in = grad_pad[:, :, p : p + h, p : p + w] if p > 0 else grad_pad
        return grad_in, {"filters": grad_w, "bias": grad_b}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d expected ({self.in_channels}, h, w), got {in_shape}")
        oh, ow = self._geometry(in_shape[1], in_shape[2])
        return (self.out_channels, oh, ow)


class ReLU:
    def params(self):
        return {}

    def forward(self, x, ctx=None):
        if ctx is not None:
            ctx["mask"] = x > 0.0
        return np.maximum(x, 0.0)

    def backward(self, ctx, grad_out):
        return grad_out * ctx["mask"], {}

    def output_shape(self, in_shape):
        return in_shape


class MaxPool2d:
    """Non-overlapping max pooling; gradient routes to the first maximum."""

    def __init__(self, size: int = 2):
        if size < 1:
            raise ShapeError("MaxPool2d: size must be >= 1")
        self.size = size

    def params(self):
        return {}

    def forward(self, x, ctx=None):
        kk = self.size
        n, c, h, w = x.shape
        if h % kk or w % kk:
            raise ShapeError(f"MaxPool2d({kk}) needs divisible input, got {h}x{w}")
        oh, ow = h // kk, w // kk
        tiles = x.reshape(n, c, oh, kk, ow, kk).transpose(0, 1, 2, 4, 3, 5)
        flat = np.ascontiguousarray(tiles).reshape(n, c, oh, ow, kk * kk)
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if ctx is not None:
            ctx["idx"] = idx
            ctx["x_shape"] = x.shape
        return out

    def backward(self, ctx, grad_out):
        kk = self.size
        n, c, h, w = ctx["x_shape"]
        oh, ow = h // kk, w // kk
        flat = np.zeros((n, c, oh, ow, kk * kk))
        np.put_along_axis(flat, ctx["idx"][..., None], grad_out[..., None], axis=-1)
        grad_in = (
            flat.reshape(n, c, oh, ow, kk, kk)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return grad_in, {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"MaxPool2d({self.size}) needs divisible input, got {in_shape}")
        return (c, h // self.size, w // self.size)


class Flatten:
    """Row-major flatten of (c, h, w) features; channel index varies slowest."""

    def params(self):
        return {}

    def forward(self, x, ctx=None):
        if ctx is not None:
            ctx["x_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, ctx, grad_out):
        return grad_out.reshape(ctx["x_shape"]), {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Stable log-sum-exp; labels are integer class ids.
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_z
    loss = -float(np.mean(log_prob[np.arange(n), labels]))
    grad = np.exp(log_prob)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
