"""Dense, normalization, activation and convolution layers."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Module, Parameter


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, bias=True):
        rng = _rng(rng)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects last dim {self.n_in}, got {x.shape[-1]} (shape {x.shape})")
        self._x = x
        y = x @ self.weight.data
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, dout):
        x = self._x
        x2 = x.reshape(-1, self.n_in)
        d2 = dout.reshape(-1, self.n_out)
        self.weight.grad += x2.T @ d2
        if self.bias is not None:
            self.bias.grad += d2.sum(0)
        return dout @ self.weight.data.T


class Embedding(Module):
    def __init__(self, num, dim, rng=None, scale=1.0):
        rng = _rng(rng)
        self.num, self.dim = num, dim
        self.weight = Parameter(rng.normal(0.0, scale, (num, dim)))

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num):
            raise ValueError(f"embedding index outside 0..{self.num - 1}")
        self._idx = idx
        return self.weight.data[idx]

    def backward(self, dout):
        idx = self._idx.reshape(-1)
        d2 = dout.reshape(-1, self.dim)
        # column-wise bincount is much faster than np.add.at for scatter-add
        for j in range(self.dim):
            self.weight.grad[:, j] += np.bincount(idx, weights=d2[:, j], minlength=self.num)
        return None


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.dim, self.eps = dim, eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"LayerNorm expects last dim {self.dim}, got {x.shape[-1]}")
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, dout):
        xhat, inv = self._cache
        self.gamma.grad += (dout * xhat).reshape(-1, self.dim).sum(0)
        self.beta.grad += dout.reshape(-1, self.dim).sum(0)
        dxhat = dout * self.gamma.data
        n = self.dim
        return inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(-1, keepdims=True))


class Dropout(Module):
    def __init__(self, p=0.1, rng=None):
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.rng = _rng(rng)

    def forward(self, x):
        if not self.training or self.p == 0:
            self._mask = None
            return x
        dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
        keep = self.rng.random(x.shape, dtype=dt) >= self.p
        self._mask = keep.astype(x.dtype) * x.dtype.type(1 / (1 - self.p))
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class ReLU(Module):
    def forward(self, x):
        self._pos = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._pos


class Tanh(Module):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dout):
        return dout * (1 - self._y * self._y)


class Conv2d(Module):
    """NCHW convolution via im2col."""

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, bias=True):
        rng = _rng(rng)
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, kernel, stride, padding
        fan_in = c_in * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, (fan_in, c_out)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def out_size(self, h, w):
        k, s, p = self.k, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"Conv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = self.out_size(h, w)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        y = cols @ self.weight.data
        if self.bias is not None:
            y += self.bias.data
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        return y.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, xshape, pshape, ho, wo = self._cache
        n = xshape[0]
        k, s, p = self.k, self.stride, self.pad
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.weight.grad += cols.T @ d2
        if self.bias is not None:
            self.bias.grad += d2.sum(0)
        dcols = (d2 @ self.weight.data.T).reshape(n, ho, wo, self.c_in, k, k)
        dxp = np.zeros(pshape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.c, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c:
            raise ValueError(f"BatchNorm2d expects (N, {self.c}, H, W), got {x.shape}")
        shape = (1, self.c, 1, 1)
        if self.training:
            mu = x.mean((0, 2, 3))
            var = x.var((0, 2, 3))
            m = x.size // self.c
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            unbiased = var * m / max(m - 1, 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mu, var = self.running_mean, self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
        self._cache = (xhat, inv, self.training)
        return xhat * self.gamma.data.reshape(shape) + self.beta.data.reshape(shape)

    def backward(self, dout):
        xhat, inv, batch_stats = self._cache
        shape = (1, self.c, 1, 1)
        self.gamma.grad += (dout * xhat).sum((0, 2, 3))
        self.beta.grad += dout.sum((0, 2, 3))
        dxhat = dout * self.gamma.data.reshape(shape)
        if not batch_stats:
            return dxhat * inv.reshape(shape)
        m = dout.size // self.c
        return inv.reshape(shape) / m * (
            m * dxhat - dxhat.sum((0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum((0, 2, 3), keepdims=True))


class AvgPool2d(Module):
    """Non-overlapping ``k x k`` average pooling."""

    def __init__(self, kernel):
        self.k = kernel

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"AvgPool2d({k}) needs H, W divisible by {k}, got {h}x{w}")
        return x.reshape(n, c, h // k, k, w // k, k).mean((3, 5))

    def backward(self, dout):
        k = self.k
        return np.repeat(np.repeat(dout, k, axis=2), k, axis=3) / (k * k)
