"""Parameters, modules and containers.

Every module implements ``forward`` (caching what it needs) and
``backward(dout)`` which accumulates parameter gradients and returns the
gradient with respect to the forward input. One forward per backward.
"""
from __future__ import annotations

import numpy as np


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _members(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                    isinstance(v, (Parameter, Module)) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in self._members():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype):
        """Cast parameters (and buffers registered in ``_buffers``) in place."""
        for m in self.modules():
            for _, value in m._members():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = np.zeros_like(value.data)
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for mname, m in self._named_modules():
            for b in getattr(m, "_buffers", ()):
                out[f"{mname}{b}"] = getattr(m, b).copy()
        return out

    def _named_modules(self, prefix=""):
        yield prefix, self
        for name, value in self._members():
            if isinstance(value, Module):
                yield from value._named_modules(prefix + name + ".")

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: model {own[name].shape}, "
                                 f"checkpoint {arr.shape}")
        params = dict(self.named_parameters())
        for name, arr in state.items():
            if name in params:
                params[name].data = arr.copy()
                params[name].grad = np.zeros_like(params[name].data)
        for mname, m in self._named_modules():
            for b in getattr(m, "_buffers", ()):
                setattr(m, b, state[f"{mname}{b}"].copy())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, dout):
        return dout


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def residual_add(a, b):
    """Elementwise skip connection; the gradient flows unchanged to both inputs."""
    if a.shape != b.shape:
        raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return a + b
