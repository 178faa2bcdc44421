"""Adam / AdamW, gradient clipping, warmup and plateau schedules."""
from __future__ import annotations

import math

import numpy as np


class Adam:
    decoupled = False

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 no_decay=()):
        self.params = list(params)
        skip = {id(p) for p in no_decay}
        self.decays = [id(p) not in skip for p in self.params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v, decays in zip(self.params, self.m, self.v, self.decays):
            g = p.grad
            wd = self.weight_decay if decays else 0.0
            if wd and not self.decoupled:
                g = g + wd * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if wd and self.decoupled:
                p.data -= (self.lr * wd) * p.data
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        out = {"t": np.array(self.t), "lr": np.array(self.lr)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for i in range(len(self.params)):
            self.m[i] = state[f"m.{i}"].astype(self.params[i].data.dtype)
            self.v[i] = state[f"v.{i}"].astype(self.params[i].data.dtype)


class AdamW(Adam):
    """Adam with decoupled weight decay."""

    decoupled = True

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 no_decay=()):
        super().__init__(params, lr, betas, eps, weight_decay, no_decay)


def grad_clip_by_norm(params, max_norm=1.0):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class WarmupSchedule:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then constant."""

    def __init__(self, optimizer, base_lr, warmup_steps=2000):
        self.opt = optimizer
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.n = 0
        self.opt.lr = self.lr_at(1)

    def lr_at(self, step):
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, step / self.warmup_steps)

    def step(self):
        """Call after each optimizer step; sets the rate for the next one."""
        self.n += 1
        self.opt.lr = self.lr_at(self.n + 1)
        return self.opt.lr


class ReduceLROnPlateau:
    def __init__(self, optimizer, factor=0.5, patience=10, threshold=1e-4, min_lr=0.0):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.opt.lr


class GradAccumulator:
    """Sum gradients over ``k`` micro-batches before one optimizer step."""

    def __init__(self, optimizer, k=2, clip=None):
        self.opt = optimizer
        self.k = k
        self.clip = clip
        self.count = 0

    def micro_step(self):
        """Register one backward pass; returns True when an update was applied."""
        self.count += 1
        if self.count < self.k:
            return False
        if self.clip is not None:
            grad_clip_by_norm(self.opt.params, self.clip)
        self.opt.step()
        self.opt.zero_grad()
        self.count = 0
        return True
