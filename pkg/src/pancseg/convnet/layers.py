"""Layer definitions and their forward/backward passes.

Activations flow as (batch, channels, height, width) until the first
fully-connected layer flattens them.  Convolutions run as im2col + GEMM
with the unfold/fold steps in the kernel backend; pooling and dropout keep
whatever dtype the input carries (float32 for training, float64 for the
gradient checker).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int | None = None

    @property
    def step(self) -> int:
        return self.window if self.stride is None else self.stride


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_units: int


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Softmax:
    classes: int = 2


def conv_out_hw(h, w, kernel, stride, pad):
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    return oh, ow


def conv_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = conv_out_hw(h, wd, kh, stride, pad)
    cols = _kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, stride,
                           pad, pad)
    wmat = w.reshape(f, -1)
    y = np.matmul(wmat[None], cols) + b[None, :, None]
    return y.reshape(n, f, oh, ow), (cols, x.shape)


def conv_backward(dy, cache, w, stride, pad):
    cols, x_shape = cache
    n, c, h, wd = x_shape
    f = w.shape[0]
    dyf = dy.reshape(n, f, -1)
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    wmat = w.reshape(f, -1)
    dcols = np.matmul(wmat.T[None], dyf)
    dx = _kernels.col2im(np.ascontiguousarray(dcols), n, c, h, wd,
                         w.shape[2], w.shape[3], stride, stride, pad, pad)
    return dx, dw, db


def maxpool_forward(x, window, step):
    y, idx = _kernels.maxpool_forward(np.ascontiguousarray(x), window, window,
                                      step, step)
    return y, (idx, x.shape)


def maxpool_backward(dy, cache):
    idx, x_shape = cache
    return _kernels.maxpool_backward(np.ascontiguousarray(dy),
                                     np.ascontiguousarray(idx),
                                     x_shape[2], x_shape[3])


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def fc_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w.T + b, (flat, x.shape)


def fc_backward(dy, cache, w):
    flat, x_shape = cache
    dw = dy.T @ flat
    db = dy.sum(axis=0)
    dx = (dy @ w).reshape(x_shape)
    return dx, dw, db


def dropout_forward(x, rate, mode, rng):
    """Inverted dropout: train-time scaling keeps the test path an identity."""
    if mode != "train" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng stream")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * np.asarray(scale, dtype=x.dtype), keep


def dropout_backward(dy, keep, rate):
    if keep is None:
        return dy
    scale = 1.0 / (1.0 - rate)
    return dy * keep * np.asarray(scale, dtype=dy.dtype)


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
