"""CAD sequence representation model: a transformer autoencoder over command matrices.

The encoder embeds each row (type plus 16 parameter levels), runs causal
self-attention, mean-pools over the real program (up to and including the
first EOS) and squashes with tanh. The decoder starts from learned constant
queries, adds a projection of the latent at every position and emits one
type distribution and 16 level distributions per row. It predicts the
program after the leading SOL, which is prepended again on decode.
"""
from __future__ import annotations

import json

import numpy as np

from ..cadlang import (N_LEVELS, N_SLOTS, SLOT_CARDINALITY, CommandType, active_mask,
                       decode_sequence, encode_sequence)
from ..nn import (Adam, Embedding, LayerNorm, Linear, Module, Parameter, TransformerLayer,
                  WarmupSchedule, cross_entropy, grad_clip_by_norm, sinusoidal_pe)
from ..nn.core import log_softmax
from .config import CsrConfig

N_TYPES = 6
MASKED_INDEX = N_LEVELS  # embedding row for inactive slots
EOS = int(CommandType.EOS)
SOL = int(CommandType.SOL)


def first_eos_lengths(mats):
    """Number of rows up to and including the first EOS (N when there is none)."""
    is_eos = mats[..., 0] == EOS
    n = mats.shape[-2]
    return np.where(is_eos.any(-1), is_eos.argmax(-1) + 1, n)


def decoder_targets(mats):
    """Shift left by one row (dropping SOL) and pad with an EOS row."""
    pad = np.full((*mats.shape[:-2], 1, mats.shape[-1]), 255, dtype=mats.dtype)
    pad[..., 0] = EOS
    return np.concatenate([mats[..., 1:, :], pad], axis=-2)


class CsrModel(Module):
    def __init__(self, cfg: CsrConfig | None = None, rng=None):
        cfg = cfg or CsrConfig()
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        d = cfg.d_z
        self.cfg = cfg
        self.type_emb = Embedding(N_TYPES, d, rng, scale=0.1)
        self.param_emb = Embedding(N_LEVELS + 1, cfg.param_embed, rng, scale=0.1)
        self.param_proj = Linear(N_SLOTS * cfg.param_embed, d, rng)
        self.enc_layers = [TransformerLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout, True, rng)
                           for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d)
        self.bottleneck = Linear(d, cfg.d_z, rng)

        self.queries = Parameter(rng.normal(0.0, 0.1, (cfg.n, d)))
        self.z_proj = Linear(cfg.d_z, d, rng)
        self.dec_layers = [TransformerLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout, True, rng)
                           for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d)
        self.type_head = Linear(d, N_TYPES, rng)
        self.param_head = Linear(d, N_SLOTS * N_LEVELS, rng)
        self.pe = sinusoidal_pe(np.arange(cfg.n), d)
        self.to(np.float32)

    @property
    def dtype(self):
        return self.queries.data.dtype

    def _check(self, mats):
        mats = np.asarray(mats)
        if mats.ndim == 2:
            mats = mats[None]
        if mats.shape[1:] != (self.cfg.n, 1 + N_SLOTS):
            raise ValueError(f"expected (B, {self.cfg.n}, {1 + N_SLOTS}) sequence matrices, "
                             f"got {mats.shape}")
        return mats

    # encoder

    def encode(self, mats):
        """``(B, N, 17)`` integer matrices -> ``(B, d_z)`` latents in (-1, 1)."""
        mats = self._check(mats)
        b, n, _ = mats.shape
        active = active_mask(mats)
        pidx = np.where(active, mats[..., 1:], MASKED_INDEX)
        pe = self.param_emb.forward(pidx).reshape(b, n, -1)
        x = self.type_emb.forward(mats[..., 0]) + self.param_proj.forward(pe)
        x = x + self.pe.astype(x.dtype)
        for layer in self.enc_layers:
            x = layer.forward(x)
        x = self.enc_ln.forward(x)
        lengths = first_eos_lengths(mats)
        w = (np.arange(n)[None, :] < lengths[:, None]).astype(x.dtype) / lengths[:, None]
        pooled = (x * w[..., None]).sum(1)
        z = np.tanh(self.bottleneck.forward(pooled))
        self._enc_cache = (w, z, b, n)
        return z

    def encode_backward(self, dz):
        w, z, b, n = self._enc_cache
        dpooled = self.bottleneck.backward(dz * (1 - z * z))
        dx = w[..., None] * dpooled[:, None, :]
        dx = self.enc_ln.backward(dx)
        for layer in reversed(self.enc_layers):
            dx = layer.backward(dx)
        self.type_emb.backward(dx)
        dpe = self.param_proj.backward(dx)
        self.param_emb.backward(dpe.reshape(b, n, N_SLOTS, -1))

    # decoder

    def decode_hidden(self, z):
        z = np.asarray(z, dtype=self.dtype)
        if z.ndim == 1:
            z = z[None]
        if z.shape[-1] != self.cfg.d_z:
            raise ValueError(f"latent dim {z.shape[-1]} != d_z {self.cfg.d_z}")
        b = z.shape[0]
        zp = self.z_proj.forward(z)
        x = np.broadcast_to(self.queries.data + self.pe.astype(self.dtype),
                            (b, *self.queries.shape)) + zp[:, None, :]
        for layer in self.dec_layers:
            x = layer.forward(x)
        return self.dec_ln.forward(x)

    def decode_hidden_backward(self, dh):
        dx = self.dec_ln.backward(dh)
        for layer in reversed(self.dec_layers):
            dx = layer.backward(dx)
        self.queries.grad += dx.sum(0)
        return self.z_proj.backward(dx.sum(1))

    def decode_logits(self, z):
        """Full per-row logits ``(B, N, 6 + 16*256)``."""
        h = self.decode_hidden(z)
        return np.concatenate([self.type_head.forward(h), self.param_head.forward(h)], -1)

    def decode(self, z):
        """Greedy decode to ``(B, N, 17)`` matrices with SOL prepended."""
        logits = self.decode_logits(z)
        return greedy_matrices(logits)

    def reconstruct(self, mats):
        return self.decode(self.encode(mats))

    # training

    def loss_and_backward(self, mats, beta=None, backward=True):
        """Forward, Eq.-1 style loss, and backward. Returns ``(loss_sum, n_rows)``."""
        mats = self._check(mats)
        beta = self.cfg.beta if beta is None else beta
        b, n, _ = mats.shape
        z = self.encode(mats)
        h = self.decode_hidden(z)
        tgt = decoder_targets(mats)
        tlog = self.type_head.forward(h)
        loss_t, dt = cross_entropy(tlog, tgt[..., 0])
        scale = 1.0 / (b * n)
        loss_p, dh_p = selective_param_loss(self.param_head, h, tgt, beta, backward, scale)
        total = loss_t + beta * loss_p
        if backward:
            dh = self.type_head.backward(dt * scale) + dh_p
            dz = self.decode_hidden_backward(dh)
            self.encode_backward(dz)
        return total, b * n

    def save(self, path, meta=None, extra=None):
        from ..nn import checkpoint_save
        from dataclasses import asdict
        checkpoint_save(self, path, config={"kind": "csr", **asdict(self.cfg)}, meta=meta,
                        extra=extra)

    @classmethod
    def load(cls, path):
        from ..nn import CheckpointError, checkpoint_load
        from .config import section_from_dict

        def build(conf):
            if conf.get("kind") != "csr":
                raise CheckpointError(f"{path}: not a CSR checkpoint (kind={conf.get('kind')})")
            return cls(section_from_dict(CsrConfig, conf))
        return checkpoint_load(path, build=build).eval()


def selective_param_loss(head, h, tgt, beta=1.0, backward=True, grad_scale=1.0):
    """Parameter cross-entropy over active target slots only.

    Logits are computed per slot for the rows where that slot is active,
    so the full ``d x 4096`` projection is never built during training.
    Returns ``(loss_sum, dh)``. Head gradients and ``dh`` both carry the
    factor ``beta * grad_scale``.
    """
    b, n, d = h.shape
    hf = h.reshape(-1, d)
    act = active_mask(tgt).reshape(-1, N_SLOTS)
    levels = tgt[..., 1:].reshape(-1, N_SLOTS)
    dh = np.zeros_like(hf)
    total = 0.0
    W, bias = head.weight, head.bias
    for s in range(N_SLOTS):
        rows = np.flatnonzero(act[:, s])
        if rows.size == 0:
            continue
        cols = slice(s * N_LEVELS, (s + 1) * N_LEVELS)
        hs = hf[rows]
        logits = hs @ W.data[:, cols] + bias.data[cols]
        loss, dl = cross_entropy(logits, levels[rows, s])
        total += loss
        if backward:
            dl = dl * (beta * grad_scale)
            W.grad[:, cols] += hs.T @ dl
            bias.grad[cols] += dl.sum(0)
            dh[rows] += dl @ W.data[:, cols].T
    return total, dh.reshape(b, n, d)


def csr_loss(type_logits, param_logits, target, beta=2.0):
    """Eq.-1 loss from full logits.

    ``type_logits`` is ``(..., N, 6)``, ``param_logits`` is ``(..., N, 16, 256)``
    and ``target`` the ``(..., N, 17)`` matrix. Inactive slots are skipped.
    """
    target = np.asarray(target)
    lt, _ = cross_entropy(type_logits, target[..., 0])
    act = active_mask(target)
    logp = log_softmax(np.asarray(param_logits, dtype=np.float64), -1)
    lv = np.where(act, target[..., 1:], 0)
    picked = np.take_along_axis(logp, lv[..., None], -1)[..., 0]
    return float(lt - beta * picked[act].sum())


def greedy_matrices(logits):
    """Argmax decode of full logits; discrete slots are restricted to valid codes."""
    logits = np.asarray(logits)
    b, n, _ = logits.shape
    types = logits[..., :N_TYPES].argmax(-1)
    plog = logits[..., N_TYPES:].reshape(b, n, N_SLOTS, N_LEVELS).copy()
    for s, card in SLOT_CARDINALITY.items():
        plog[..., s, card:] = -np.inf
    levels = plog.argmax(-1)
    pred = np.concatenate([types[..., None], levels], -1).astype(np.int64)
    pred[..., 1:] = np.where(active_mask(pred), pred[..., 1:], 255)
    sol = np.full((b, 1, 1 + N_SLOTS), 255, dtype=np.int64)
    sol[..., 0] = SOL
    return np.concatenate([sol, pred[:, :-1]], axis=1)


def matrices_to_sequences(mats):
    """Decode predicted matrices; malformed ones become ``None``."""
    out = []
    for m in mats:
        try:
            out.append(decode_sequence(m))
        except ValueError:
            out.append(None)
    return out


def encode_corpus(seqs, n):
    return np.stack([encode_sequence(s, n) for s in seqs])


def train_csr(model, mats, steps=None, batch_size=None, lr=None, warmup=None, seed=None,
              log=None, start_step=0, optimizer=None, until=None, check_every=250):
    """Adam with linear warmup and gradient clipping.

    ``log(record)`` receives ``{step, loss, lr}`` dicts. When ``until`` is
    given it is called every ``check_every`` steps and training stops as
    soon as it returns True. Returns ``(optimizer, last_step)``.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    batch_size = cfg.batch_size if batch_size is None else batch_size
    lr = cfg.lr if lr is None else lr
    warmup = cfg.warmup_steps if warmup is None else warmup
    seed = cfg.seed if seed is None else seed
    # a resumed run draws a fresh but reproducible batch stream
    rng = np.random.default_rng(seed if start_step == 0 else [seed, start_step])
    mats = np.asarray(mats)
    model.train()
    opt = optimizer or Adam(model.parameters(), lr=lr)
    sched = WarmupSchedule(opt, lr, warmup)
    sched.n = start_step
    opt.lr = sched.lr_at(start_step + 1)
    step = start_step
    order = np.empty(0, dtype=np.int64)
    while step < start_step + steps:
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(mats))])
        idx, order = order[:batch_size], order[batch_size:]
        model.zero_grad()
        loss, rows = model.loss_and_backward(mats[idx])
        grad_clip_by_norm(model.parameters(), cfg.grad_clip)
        opt.step()
        cur_lr = opt.lr
        sched.step()
        step += 1
        if log is not None:
            log({"step": step, "loss": loss / rows, "lr": cur_lr})
        if until is not None and step % check_every == 0:
            model.eval()
            done = until(model)
            model.train()
            if done:
                break
    model.eval()
    return opt, step


def jsonl_logger(fh):
    def log(rec):
        fh.write(json.dumps(rec) + "\n")
    return log
