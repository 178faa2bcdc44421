"""Latent diffusion prior (DDPM over CAD latents) and the deterministic baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..nn import (Adam, Dropout, LayerNorm, Linear, Module, Parameter, ReLU, grad_clip_by_norm,
                  mse, sinusoidal_pe)
from .config import CdpConfig, PriorConfig, section_from_dict


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index t-1 holds beta_t, t = 1..T

    @classmethod
    def linear(cls, timesteps=500, beta_start=1e-4, beta_end=0.02):
        return cls(np.linspace(beta_start, beta_end, timesteps))

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bar(self):
        return np.cumprod(self.alphas)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside 1..{self.T}")
        return t

    def q_sample(self, z0, t, eps):
        """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
        t = self._check(t)
        ab = self.alpha_bar[t - 1]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(z0) - np.ndim(ab)))
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    def step_forward(self, z_prev, t, eps):
        """One Markov step ``q(z_t | z_{t-1})``."""
        t = self._check(t)
        b = self.betas[t - 1]
        return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * eps


class ResMLPBlock(Module):
    """``x + fc2(dropout(relu(fc1(ln(x)))))``."""

    def __init__(self, width, dropout, rng):
        self.ln = LayerNorm(width)
        self.fc1 = Linear(width, width, rng)
        self.act = ReLU()
        self.drop = Dropout(dropout, rng)
        self.fc2 = Linear(width, width, rng)

    def forward(self, x):
        return x + self.fc2.forward(self.drop.forward(self.act.forward(
            self.fc1.forward(self.ln.forward(x)))))

    def backward(self, dout):
        return dout + self.ln.backward(self.fc1.backward(self.act.backward(
            self.drop.backward(self.fc2.backward(dout)))))


class ResMLP(Module):
    def __init__(self, d_in, d_out, width, blocks, dropout, rng):
        self.inp = Linear(d_in, width, rng)
        self.blocks = [ResMLPBlock(width, dropout, rng) for _ in range(blocks)]
        self.ln = LayerNorm(width)
        self.out = Linear(width, d_out, rng)

    def forward(self, x):
        h = self.inp.forward(x)
        for b in self.blocks:
            h = b.forward(h)
        return self.out.forward(self.ln.forward(h))

    def backward(self, dout):
        d = self.ln.backward(self.out.backward(dout))
        for b in reversed(self.blocks):
            d = b.backward(d)
        return self.inp.backward(d)


class CdpModel(Module):
    """Denoiser on ``concat(z_t, condition or learned null, timestep embedding)``."""

    def __init__(self, cfg: CdpConfig | None = None, rng=None):
        cfg = cfg or CdpConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        self.schedule = NoiseSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.null_cond = Parameter(np.zeros(cfg.cond_dim))
        self.net = ResMLP(cfg.d_z + cfg.cond_dim + cfg.time_dim, cfg.d_z, cfg.width, cfg.blocks,
                          cfg.dropout, rng)
        if cfg.predict not in ("eps", "z0"):
            raise ValueError(f"predict must be 'eps' or 'z0', got {cfg.predict!r}")
        self.to(np.float32)

    @property
    def dtype(self):
        return self.null_cond.data.dtype

    def _cond(self, cond, n):
        if cond is None or not self.cfg.conditional:
            self._used_null = True
            return np.broadcast_to(self.null_cond.data, (n, self.cfg.cond_dim))
        cond = np.asarray(cond, dtype=self.dtype)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0]))
        if cond.shape != (n, self.cfg.cond_dim):
            raise ValueError(f"condition shape {cond.shape} != ({n}, {self.cfg.cond_dim})")
        self._used_null = False
        return cond

    def forward(self, z_t, t, cond=None):
        z_t = np.asarray(z_t, dtype=self.dtype)
        n = z_t.shape[0]
        temb = sinusoidal_pe(np.asarray(t).reshape(-1), self.cfg.time_dim).astype(self.dtype)
        temb = np.broadcast_to(temb, (n, self.cfg.time_dim))
        x = np.concatenate([z_t, self._cond(cond, n), temb], 1)
        return self.net.forward(x)

    def backward(self, dout):
        dx = self.net.backward(dout)
        if self._used_null:
            d = self.cfg.d_z
            self.null_cond.grad += dx[:, d:d + self.cfg.cond_dim].sum(0)
        return dx[:, :self.cfg.d_z]

    def predict_eps(self, z_t, t, cond=None):
        out = self.forward(z_t, t, cond)
        if self.cfg.predict == "eps":
            return out
        ab = self.schedule.alpha_bar[np.asarray(t) - 1]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (2 - np.ndim(ab)))
        return (z_t - np.sqrt(ab) * out) / np.sqrt(1.0 - ab)

    def train_step(self, z0, cond, rng):
        """Uniform ``t``, Gaussian noise, MSE on the prediction target; returns the loss."""
        z0 = np.asarray(z0, dtype=self.dtype)
        n = z0.shape[0]
        t = rng.integers(1, self.schedule.T + 1, n)
        eps = rng.standard_normal(z0.shape).astype(self.dtype)
        z_t = self.schedule.q_sample(z0, t, eps).astype(self.dtype)
        pred = self.forward(z_t, t[:, None], cond)
        target = eps if self.cfg.predict == "eps" else z0
        loss, grad = mse(pred, target)
        self.backward(grad.astype(self.dtype))
        return loss

    def sample(self, n, cond=None, seed=0, clip=None):
        """Ancestral DDPM sampling with ``sigma_t^2 = beta_t``."""
        rng = np.random.default_rng(seed)
        was_training = self.training
        self.eval()
        sch = self.schedule
        z = rng.standard_normal((n, self.cfg.d_z))
        for t in range(sch.T, 0, -1):
            eps = self.predict_eps(z.astype(self.dtype), np.full((n, 1), t), cond)
            b, a, ab = sch.betas[t - 1], sch.alphas[t - 1], sch.alpha_bar[t - 1]
            z = (z - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
            if t > 1:
                z = z + np.sqrt(b) * rng.standard_normal(z.shape)
        self.train(was_training)
        if clip is not None:
            z = np.clip(z, -clip, clip)
        return z

    def save(self, path, meta=None):
        from ..nn import checkpoint_save
        checkpoint_save(self, path, config={"kind": "cdp", **asdict(self.cfg)}, meta=meta)

    @classmethod
    def load(cls, path):
        from ..nn import CheckpointError, checkpoint_load

        def build(conf):
            if conf.get("kind") != "cdp":
                raise CheckpointError(f"{path}: not a CDP checkpoint (kind={conf.get('kind')})")
            return cls(section_from_dict(CdpConfig, conf))
        return checkpoint_load(path, build=build).eval()


def train_cdp(model, z0, cond=None, steps=None, batch_size=None, lr=None, seed=None, log=None,
              start_step=0, grad_accum=None):
    """Adam with gradient accumulation and clipping. Returns the last step."""
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    batch_size = min(cfg.batch_size if batch_size is None else batch_size, len(z0))
    k = cfg.grad_accum if grad_accum is None else grad_accum
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = Adam(model.parameters(), lr=cfg.lr if lr is None else lr)
    z0 = np.asarray(z0)
    model.train()
    step = start_step
    model.zero_grad()
    for step in range(start_step + 1, start_step + steps + 1):
        total = 0.0
        for _ in range(k):
            idx = rng.choice(len(z0), batch_size, replace=False)
            c = None if cond is None else np.asarray(cond)[idx]
            total += model.train_step(z0[idx], c, rng)
        for p in model.parameters():
            p.grad /= k
        grad_clip_by_norm(model.parameters(), cfg.grad_clip)
        opt.step()
        model.zero_grad()
        if log is not None:
            log({"step": step, "loss": total / k, "lr": opt.lr})
    model.eval()
    return step


class DeterministicPrior(Module):
    """ResNet-MLP regression from image latent to CAD latent."""

    def __init__(self, cfg: PriorConfig | None = None, rng=None):
        cfg = cfg or PriorConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        self.net = ResMLP(cfg.cond_dim, cfg.d_z, cfg.width, cfg.blocks, cfg.dropout, rng)
        self.to(np.float32)

    def forward(self, z_image):
        return self.net.forward(np.asarray(z_image, dtype=np.float32))

    def backward(self, dout):
        return self.net.backward(dout)

    def predict(self, z_image):
        was = self.training
        self.eval()
        out = self.forward(z_image)
        self.train(was)
        return out

    def save(self, path, meta=None):
        from ..nn import checkpoint_save
        checkpoint_save(self, path, config={"kind": "prior", **asdict(self.cfg)}, meta=meta)


def train_prior(model, z_image, z_cad, steps=None, batch_size=64, seed=None, log=None):
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    batch_size = min(batch_size, len(z_image))
    model.train()
    for step in range(1, steps + 1):
        idx = rng.choice(len(z_image), batch_size, replace=False)
        model.zero_grad()
        loss, grad = mse(model.forward(z_image[idx]), np.asarray(z_cad[idx], dtype=np.float32))
        model.backward(grad.astype(np.float32))
        opt.step()
        if log is not None:
            log({"step": step, "loss": loss, "lr": opt.lr})
    model.eval()
    return model
