"""Contrastive CAD-image pretraining.

An 18-layer residual image encoder is trained so its latent matches the
frozen CSR latent of the same program under an NT-Xent objective built
from 2B interleaved views ``[cad_1, img_1, cad_2, img_2, ...]``.
"""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from ..imaging import preprocess_for_encoder
from ..nn import (AdamW, AvgPool2d, BatchNorm2d, Conv2d, Dropout, Linear, Module, Parameter,
                  ReLU, ReduceLROnPlateau, param_hash)
from .config import CcipConfig, section_from_dict
from .csr import CsrModel


class BasicBlock(Module):
    """conv-bn-dropout-relu-conv-bn plus identity or 1x1 projection shortcut."""

    def __init__(self, c_in, c_out, stride, dropout, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, stride, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(c_out)
        self.drop = Dropout(dropout, rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(c_out, c_out, 3, 1, 1, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride, 0, rng, bias=False)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = self.proj_bn = None
        self.relu2 = ReLU()

    def forward(self, x):
        h = self.relu1.forward(self.drop.forward(self.bn1.forward(self.conv1.forward(x))))
        h = self.bn2.forward(self.conv2.forward(h))
        s = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return self.relu2.forward(h + s)

    def backward(self, dout):
        d = self.relu2.backward(dout)
        dh = self.conv2.backward(self.bn2.backward(d))
        dx = self.conv1.backward(self.bn1.backward(self.drop.backward(self.relu1.backward(dh))))
        if self.proj is None:
            return dx + d
        return dx + self.proj.backward(self.proj_bn.backward(d))


class ResNetEncoder(Module):
    """Stem (7x7/2 conv, BN, ReLU, 2x2 pool), four stages of two blocks, linear head."""

    def __init__(self, widths=(8, 16, 32, 64), d_out=64, image_size=256, dropout=0.1,
                 in_channels=1, rng=None):
        rng = np.random.default_rng(rng)
        self.stem = Conv2d(in_channels, widths[0], 7, 2, 3, rng, bias=False)
        self.stem_bn = BatchNorm2d(widths[0])
        self.stem_relu = ReLU()
        self.pool = AvgPool2d(2)
        blocks = []
        c = widths[0]
        for i, w in enumerate(widths):
            blocks.append(BasicBlock(c, w, 1 if i == 0 else 2, dropout, rng))
            blocks.append(BasicBlock(w, w, 1, dropout, rng))
            c = w
        self.blocks = blocks
        side = image_size // 4 // 2 ** (len(widths) - 1)
        if side < 1:
            raise ValueError(f"image size {image_size} too small for {len(widths)} stages")
        self.feature_shape = (c, side, side)
        self.head = Linear(c * side * side, d_out, rng)
        self.image_size = image_size

    def forward(self, x):
        if x.ndim == 3:
            x = x[:, None]
        h = self.pool.forward(self.stem_relu.forward(self.stem_bn.forward(self.stem.forward(x))))
        for b in self.blocks:
            h = b.forward(h)
        self._fshape = h.shape
        return self.head.forward(h.reshape(h.shape[0], -1))

    def backward(self, dout):
        d = self.head.backward(dout).reshape(self._fshape)
        for b in reversed(self.blocks):
            d = b.backward(d)
        return self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(self.pool.backward(d))))


def _normalize(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12), n


def _normalize_backward(u, n, du):
    return (du - u * (u * du).sum(-1, keepdims=True)) / np.maximum(n, 1e-12)


def nt_xent(cad, img, tau=0.07, with_grad=True):
    """NT-Xent over the 2B interleaved views.

    ``l(i, j) = -log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau))`` with
    cosine similarities; the loss averages ``l(2k-1, 2k) + l(2k, 2k-1)``
    over the B pairs and divides by 2B. Returns ``(loss, d_cad, d_img,
    d_inv_tau)``.
    """
    cad = np.asarray(cad, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    b = cad.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs a batch of at least 2 pairs")
    if img.shape != cad.shape:
        raise ValueError(f"latent shapes differ: {cad.shape} vs {img.shape}")
    v = np.empty((2 * b, cad.shape[1]))
    v[0::2], v[1::2] = cad, img
    u, norms = _normalize(v)
    sim = u @ u.T
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    partner = np.arange(2 * b) ^ 1
    rows = np.arange(2 * b)
    loss = -logp[rows, partner].sum() / (2 * b)
    if not with_grad:
        return float(loss), None, None, None
    p = np.exp(logp)
    dlogits = p
    dlogits[rows, partner] -= 1.0
    dlogits /= 2 * b
    dsim = dlogits / tau
    d_inv_tau = float((dlogits * np.where(np.eye(2 * b, dtype=bool), 0.0, sim)).sum())
    du = (dsim + dsim.T) @ u
    dv = _normalize_backward(u, norms, du)
    return float(loss), dv[0::2], dv[1::2], d_inv_tau


def nt_xent_lower_bound(cad, tau):
    """Smallest NT-Xent any image encoder can reach against fixed CAD latents.

    CAD-CAD similarities are negatives for every CAD row and do not depend
    on the images. Dropping the image negatives and taking the positive
    similarity at its maximum of 1 leaves, per CAD row,
    ``log(1 + sum_{j != i} exp((s_ij - 1) / tau))``; image rows are >= 0.
    """
    u, _ = _normalize(np.asarray(cad, dtype=np.float64))
    sim = u @ u.T
    np.fill_diagonal(sim, -np.inf)
    rows = np.log1p(np.exp((sim - 1.0) / tau).sum(1))
    return float(rows.sum() / (2 * len(u)))


MIN_TAU = 0.01


class CcipModel(Module):
    """Image encoder plus a frozen CSR encoder handle (not part of the parameters)."""

    def __init__(self, cfg: CcipConfig | None = None, csr: CsrModel | None = None, rng=None):
        cfg = cfg or CcipConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        self.image_encoder = ResNetEncoder(cfg.width_list, cfg.d_z, cfg.image_size,
                                           cfg.dropout, 1, rng)
        self.log_inv_tau = Parameter(np.array([np.log(1.0 / cfg.tau)]))
        self.to(np.float32)
        # held in a dict so the frozen model stays out of parameter discovery
        self._frozen = {"csr": csr.eval() if csr is not None else None}

    @property
    def csr(self):
        return self._frozen["csr"]

    def attach_csr(self, csr):
        if csr.cfg.d_z != self.cfg.d_z:
            raise ValueError(f"CSR latent dim {csr.cfg.d_z} != CCIP d_z {self.cfg.d_z}")
        self._frozen["csr"] = csr.eval()

    @property
    def tau(self):
        return float(1.0 / np.exp(self.log_inv_tau.data[0]))

    def clamp_tau(self):
        """Keep tau >= MIN_TAU, as a learned temperature can otherwise collapse."""
        np.minimum(self.log_inv_tau.data, np.log(1.0 / MIN_TAU), out=self.log_inv_tau.data)

    def trainable_parameters(self):
        return [p for name, p in self.named_parameters()
                if name != "log_inv_tau" or self.cfg.learn_tau]

    def preprocess(self, images):
        """Gray images (any size) -> ``(B, S, S)`` normalized encoder inputs."""
        return np.stack([preprocess_for_encoder(im, self.cfg.image_size) for im in images]
                        ).astype(np.float32)

    def encode_images(self, x, batch=64):
        """Image latents for preprocessed inputs; batched to bound memory."""
        out = [self.image_encoder.forward(x[i:i + batch]) for i in range(0, len(x), batch)]
        return np.concatenate(out)

    def encode_cad(self, mats):
        if self.csr is None:
            raise RuntimeError("CCIP has no CSR encoder attached")
        return self.csr.encode(mats)

    def train_step(self, x, z_cad):
        """One forward/backward over a batch; returns the loss."""
        z_img = self.image_encoder.forward(x)
        loss, _, d_img, d_inv_tau = nt_xent(z_cad, z_img, self.tau)
        self.image_encoder.backward(d_img.astype(z_img.dtype))
        if self.cfg.learn_tau:
            self.log_inv_tau.grad += d_inv_tau / self.tau
        return loss

    def evaluate(self, x, z_cad):
        """Eval-mode loss and in-batch top-1 accuracy (image query over CAD latents)."""
        self.eval()
        z_img = self.encode_images(x)
        loss = nt_xent(z_cad, z_img, self.tau, with_grad=False)[0]
        ui, _ = _normalize(z_img.astype(np.float64))
        uc, _ = _normalize(np.asarray(z_cad, dtype=np.float64))
        top1 = (ui @ uc.T).argmax(1) == np.arange(len(ui))
        return loss, float(top1.mean())

    def save(self, path, meta=None):
        from ..nn import checkpoint_save
        meta = dict(meta or {})
        if self.csr is not None:
            meta["csr_hash"] = param_hash(self.csr)
        checkpoint_save(self, path, config={"kind": "ccip", **asdict(self.cfg)}, meta=meta)

    @classmethod
    def load(cls, path, csr=None):
        from ..nn import CheckpointError, checkpoint_load, read_checkpoint

        def build(conf):
            if conf.get("kind") != "ccip":
                raise CheckpointError(f"{path}: not a CCIP checkpoint (kind={conf.get('kind')})")
            return cls(section_from_dict(CcipConfig, conf))
        model = checkpoint_load(path, build=build).eval()
        if csr is not None:
            want = read_checkpoint(path).meta.get("csr_hash")
            if want is not None and want != param_hash(csr):
                raise CheckpointError(f"{path}: CCIP was trained against a different CSR encoder")
            model.attach_csr(csr)
        return model


def train_ccip(model, x, z_cad, epochs=None, batch_size=None, seed=None, log=None,
               until=None, start_epoch=0):
    """AdamW with plateau scheduling on a fixed set of (image, CAD latent) pairs.

    ``x`` is preprocessed ``(n, S, S)`` input and ``z_cad`` the frozen CAD
    latents. The CSR encoder is never touched. Returns the last epoch.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = min(cfg.batch_size if batch_size is None else batch_size, len(x))
    if batch_size < 2:
        raise ValueError("CCIP training needs at least 2 pairs")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    # the temperature is not a weight: decaying log(1/tau) would pull tau towards 1
    opt = AdamW(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                no_decay=[model.log_inv_tau])
    plateau = ReduceLROnPlateau(opt, factor=0.5, patience=cfg.plateau_patience)
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        model.train()
        order = rng.permutation(len(x))
        total, nb = 0.0, 0
        for i in range(0, len(x) - batch_size + 1, batch_size):
            idx = order[i:i + batch_size]
            model.zero_grad()
            total += model.train_step(x[idx], z_cad[idx])
            nb += 1
            opt.step()
            model.clamp_tau()
        mean = total / max(nb, 1)
        plateau.step(mean)
        if log is not None:
            log({"step": epoch, "loss": mean, "lr": opt.lr})
        if until is not None and until(model):
            break
    model.eval()
    return epoch
