"""Multi-head self-attention and pre-norm transformer layers."""
from __future__ import annotations

import numpy as np

from .core import Module, softmax, softmax_backward
from .layers import Dropout, LayerNorm, Linear, ReLU, _rng


def sinusoidal_pe(position, dim):
    """Transformer positional encoding; ``position`` may be a scalar or an array."""
    pos = np.asarray(position, dtype=np.float64)
    i = np.arange(dim)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos[..., None] * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def causal_mask(n):
    """``True`` where attention is allowed (key index <= query index)."""
    return np.tril(np.ones((n, n), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng=None, causal=False):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        rng = _rng(rng)
        self.dim, self.heads, self.causal = dim, heads, causal
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"attention expects (B, L, {self.dim}), got {x.shape}")
        n = x.shape[1]
        q, k, v = (self._split(m.forward(x)) for m in (self.q, self.k, self.v))
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if self.causal:
            scores = np.where(causal_mask(n), scores, -np.inf)
        attn = softmax(scores, -1)
        out = attn @ v
        self._cache = (q, k, v, attn, scale)
        self.last_attention = attn
        return self.o.forward(self._merge(out))

    def backward(self, dout):
        q, k, v, attn, scale = self._cache
        dmerged = self.o.backward(dout)
        dout_h = self._split(dmerged)
        dattn = dout_h @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dout_h
        dscores = softmax_backward(attn, dattn) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dx = self.q.backward(self._merge(dq))
        dx = dx + self.k.backward(self._merge(dk))
        dx = dx + self.v.backward(self._merge(dv))
        return dx


class FeedForward(Module):
    def __init__(self, dim, hidden, dropout=0.0, rng=None):
        rng = _rng(rng)
        self.fc1 = Linear(dim, hidden, rng)
        self.act = ReLU()
        self.drop = Dropout(dropout, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2.forward(self.drop.forward(self.act.forward(self.fc1.forward(x))))

    def backward(self, dout):
        return self.fc1.backward(self.act.backward(self.drop.backward(self.fc2.backward(dout))))


class TransformerLayer(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``h + ffn(ln(h))``."""

    def __init__(self, dim, heads, ffn_dim, dropout=0.1, causal=True, rng=None):
        rng = _rng(rng)
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, causal=causal)
        self.drop1 = Dropout(dropout, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout, rng)
        self.drop2 = Dropout(dropout, rng)

    def forward(self, x):
        h = x + self.drop1.forward(self.attn.forward(self.ln1.forward(x)))
        return h + self.drop2.forward(self.ffn.forward(self.ln2.forward(h)))

    def backward(self, dout):
        dh = dout + self.ln2.backward(self.ffn.backward(self.drop2.backward(dout)))
        return dh + self.ln1.backward(self.attn.backward(self.drop1.backward(dh)))
