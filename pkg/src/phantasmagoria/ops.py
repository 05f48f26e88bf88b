"""Differentiable array operations used by the network forward/backward passes.

All image batches are NHWC float arrays. Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes the upstream
gradient plus that cache and returns gradients for its inputs. Convolutions
are stride-1 with 'same' zero padding (odd kernels only), so spatial size is
changed exclusively by pooling and upsampling.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x, w, b):
    """x: (n, d_in), w: (d_in, d_out), b: (d_out,)."""
    return x @ w + b, (x, w)


def dense_backward(grad, cache):
    x, w = cache
    gx = grad @ w.T
    gw = x.T @ grad
    gb = grad.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# convolution (stride 1, 'same' zero padding)
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw):
    """Extract (n*h*w, kh*kw*c) patch matrix from a padded NHWC array."""
    n, hp, wp, c = x.shape
    h, w = hp - kh + 1, wp - kw + 1
    # windows: (n, h, w, c, kh, kw) -> reorder so each row is (kh, kw, c)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)
    return np.ascontiguousarray(cols), (n, h, w)


def conv2d_forward(x, w, b):
    """x: (n, h, w, c_in), w: (kh, kw, c_in, c_out), b: (c_out,)."""
    kh, kw, c_in, c_out = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same-padding convolution requires odd kernels")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols, (n, h, wid) = _im2col(xp, kh, kw)
    out = cols @ w.reshape(kh * kw * c_in, c_out) + b
    return out.reshape(n, h, wid, c_out), (cols, x.shape, w)


def conv2d_backward(grad, cache):
    cols, x_shape, w = cache
    kh, kw, c_in, c_out = w.shape
    n, h, wid, _ = grad.shape
    gmat = grad.reshape(n * h * wid, c_out)
    gw = (cols.T @ gmat).reshape(kh, kw, c_in, c_out)
    gb = gmat.sum(axis=0)
    # grad wrt input: correlate the upstream gradient with the kernel
    # flipped in space and transposed in channels; same padding again.
    w_flip = w[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, c_out, c_in)
    ph, pw = kh // 2, kw // 2
    gp = np.pad(grad, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    gcols, _ = _im2col(gp, kh, kw)
    gx = (gcols @ w_flip.reshape(kh * kw * c_out, c_in)).reshape(x_shape)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# 2x2 max pooling (stride 2)
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    r = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    r = r.reshape(n, h // 2, w // 2, c, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(grad, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    g = np.zeros((n, h // 2, w // 2, c, 4), dtype=grad.dtype)
    np.put_along_axis(g, idx[..., None], grad[..., None], axis=-1)
    g = g.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(x_shape)


# ---------------------------------------------------------------------------
# nearest-neighbor upsampling
# ---------------------------------------------------------------------------

def upsample_forward(x, factor):
    if factor != int(factor) or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    out = np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)
    return out, (factor, x.shape)


def upsample_backward(grad, cache):
    factor, x_shape = cache
    n, h, w, c = x_shape
    return grad.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    out = np.maximum(x, 0)
    return out, x > 0


def relu_backward(grad, cache):
    return grad * cache


def leaky_relu_forward(x, slope=0.2):
    out = np.where(x > 0, x, slope * x)
    return out, (x > 0, slope)


def leaky_relu_backward(grad, cache):
    pos, slope = cache
    return np.where(pos, grad, slope * grad)


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(grad, cache):
    return grad * cache * (1.0 - cache)


class Adam:
    """Adam over a dict of named parameter tensors, updated in place.

    Defaults follow the usual GAN setting (beta1 lowered to 0.5).
    """

    def __init__(self, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, tensors, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            g = g.astype(tensors[name].dtype, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(tensors[name])
                self.v[name] = np.zeros_like(tensors[name])
            v = self.v[name]
            m *= b1; m += (1.0 - b1) * g
            v *= b2; v += (1.0 - b2) * g * g
            tensors[name] -= scale * m / (np.sqrt(v) + self.eps)
