"""Reconstruction and generative metrics, each fast path paired with a brute-force oracle."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cadlang import CommandType, active_mask, validate
from .geometry import GeometryError, execute, is_valid
from .kernels import jacobi_eigh, nn_sqdist_brute

EOS = int(CommandType.EOS)


# ------------------------------------------------------------ reconstruction

def _aligned(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"sequence shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def _n_commands(gt):
    """Ground-truth program length: rows before the first EOS."""
    is_eos = gt[..., 0] == EOS
    return np.where(is_eos.any(-1), is_eos.argmax(-1), gt.shape[-2])


def cmd_accuracy(pred, gt):
    """Mean over programs of the fraction of ground-truth commands whose type matches."""
    pred, gt = _aligned(pred, gt)
    nc = _n_commands(gt)
    pos = np.arange(gt.shape[1])[None, :] < nc[:, None]
    match = (pred[..., 0] == gt[..., 0]) & pos
    return float(np.mean(match.sum(1) / np.maximum(nc, 1)))


def param_accuracy(pred, gt, eta=3):
    """Mean over programs of the fraction of active parameters within ``eta`` levels.

    Only commands whose type matches count, and only the slots that type
    uses. The comparison is strict: an error of exactly ``eta`` is wrong.
    Programs with no matched command are skipped.
    """
    pred, gt = _aligned(pred, gt)
    nc = _n_commands(gt)
    pos = np.arange(gt.shape[1])[None, :] < nc[:, None]
    match = (pred[..., 0] == gt[..., 0]) & pos
    slots = active_mask(gt) & match[..., None]
    close = np.abs(pred[..., 1:].astype(np.int64) - gt[..., 1:].astype(np.int64)) < eta
    denom = slots.sum((1, 2))
    hits = (close & slots).sum((1, 2))
    keep = denom > 0
    if not keep.any():
        return 0.0
    return float(np.mean(hits[keep] / denom[keep]))


def _cloud(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ValueError(f"expected a nonempty (n, 3) point cloud, got shape {x.shape}")
    return x


def _one_sided(x, y, tree=None):
    """Squared nearest-neighbour distances from each point of x to y."""
    if tree is None:
        return nn_sqdist_brute(x, y)[0]
    _, idx = tree.query(x, k=1)
    d = x - y[idx]
    # recomputed in the brute-force kernel's order so both paths agree bitwise
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def chamfer(x, y, method="kdtree", trees=None):
    """``mean_x min_y |x-y|^2 + mean_y min_x |x-y|^2``."""
    x, y = _cloud(x), _cloud(y)
    if method == "brute":
        return float(_one_sided(x, y).mean() + _one_sided(y, x).mean())
    if method != "kdtree":
        raise ValueError(f"unknown chamfer method {method!r}")
    tx, ty = trees if trees is not None else (cKDTree(x), cKDTree(y))
    return float(_one_sided(x, y, ty).mean() + _one_sided(y, x, tx).mean())


def chamfer_matrix(S, G, method="kdtree"):
    """``D[i, j] = chamfer(S[i], G[j])``; k-d trees are built once per cloud."""
    S = [_cloud(s) for s in S]
    G = [_cloud(g) for g in G]
    if not S or not G:
        raise ValueError("empty shape set")
    D = np.empty((len(S), len(G)))
    if method == "brute":
        for i, s in enumerate(S):
            for j, g in enumerate(G):
                D[i, j] = chamfer(s, g, "brute")
        return D
    ts = [cKDTree(s) for s in S]
    tg = [cKDTree(g) for g in G]
    for i, s in enumerate(S):
        for j, g in enumerate(G):
            D[i, j] = chamfer(s, g, trees=(ts[i], tg[j]))
    return D


def sequence_is_valid(seq):
    """Grammar check, then execution to a solid with some interior."""
    if seq is None or not validate(seq).ok:
        return False
    try:
        return is_valid(execute(seq))
    except GeometryError:
        return False


def invalid_ratio(seqs):
    """Fraction of programs that fail validation or produce no solid. ``None`` counts as invalid."""
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty sequence set")
    return sum(not sequence_is_valid(s) for s in seqs) / len(seqs)


# ---------------------------------------------------------------- generative

def cov_mmd_from_matrix(D):
    """COV and MMD from ``D[i, j] = d_CD(S_i, G_j)``, S the reference set."""
    D = np.asarray(D)
    if D.size == 0:
        raise ValueError("empty shape set")
    matched = np.unique(D.argmin(0))
    cov = len(matched) / D.shape[0]
    # fsum is exactly rounded, so the result does not depend on summation order
    mmd = math.fsum(D.min(1)) / D.shape[0]
    return cov, mmd


def cov(S, G, method="kdtree"):
    return cov_mmd_from_matrix(chamfer_matrix(S, G, method))[0]


def mmd(S, G, method="kdtree"):
    return cov_mmd_from_matrix(chamfer_matrix(S, G, method))[1]


def cov_mmd_brute(S, G):
    """Direct transcription of the two set definitions, no shared matrix."""
    S = list(S)
    G = list(G)
    if not S or not G:
        raise ValueError("empty shape set")
    matched = set()
    for X in G:
        best, arg = math.inf, None
        for k, Y in enumerate(S):
            d = chamfer(Y, X, "brute")
            if d < best:
                best, arg = d, k
        matched.add(arg)
    mins = [min(chamfer(Y, X, "brute") for X in G) for Y in S]
    return len(matched) / len(S), math.fsum(mins) / len(S)


def occupancy(clouds, grid=28):
    """Normalized histogram of all points on a ``grid**3`` lattice over [-1, 1]^3."""
    pts = np.concatenate([_cloud(c) for c in clouds])
    idx = np.clip(((pts + 1.0) * 0.5 * grid).astype(np.int64), 0, grid - 1)
    flat = (idx[:, 0] * grid + idx[:, 1]) * grid + idx[:, 2]
    h = np.bincount(flat, minlength=grid ** 3).astype(np.float64)
    return h / h.sum()


def _kl_to_mixture(p, q, m):
    """KL(p || m) with m = (p + q) / 2.

    Bins where only p has mass contribute ``p log 2`` each. With no shared
    bin at all that mass is exactly 1, so disjoint histograms give ln 2 exactly.
    """
    shared = (p > 0) & (q > 0)
    if not shared.any():
        return math.log(2)
    ps, ms = p[shared], m[shared]
    return math.log(2) * float(p[~shared].sum()) + float((ps * np.log(ps / ms)).sum())


def histogram_jsd(p, q):
    """Jensen-Shannon divergence of two histograms (natural log, 0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    # summing the two halves in sorted order keeps jsd(p, q) == jsd(q, p) exactly
    a, b = sorted((_kl_to_mixture(p, q, m), _kl_to_mixture(q, p, m)))
    return max(0.5 * a + 0.5 * b, 0.0)


def jsd(S, G, grid=28):
    if not len(S) or not len(G):
        raise ValueError("empty shape set")
    return histogram_jsd(occupancy(S, grid), occupancy(G, grid))


# ------------------------------------------------------------------------ FID

def sqrtm_psd(a, tol=1e-10):
    """Square root of a symmetric PSD matrix by Jacobi eigendecomposition.

    Negative eigenvalues (round-off) are clipped to zero with a warning.
    """
    a = np.asarray(a, dtype=np.float64)
    a = 0.5 * (a + a.T)
    w, v = jacobi_eigh(a, tol)
    if np.any(w < 0):
        warnings.warn(f"clipping negative eigenvalue {float(w.min()):.3g} in matrix square root",
                      RuntimeWarning, stacklevel=2)
        w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(emb_s, emb_g):
    """Frechet distance between Gaussian fits of two embedding sets.

    ``tr((S_s S_g)^{1/2})`` is taken as ``tr((A S_g A)^{1/2})`` with
    ``A = S_s^{1/2}``; the inner product is symmetric PSD and has the
    same eigenvalues as ``S_s S_g``.
    """
    xs = np.asarray(emb_s, dtype=np.float64)
    xg = np.asarray(emb_g, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xg.ndim == 1:
        xg = xg[:, None]
    if len(xs) < 2 or len(xg) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    mu_s, mu_g = xs.mean(0), xg.mean(0)
    cs = np.atleast_2d(np.cov(xs, rowvar=False))
    cg = np.atleast_2d(np.cov(xg, rowvar=False))
    a = sqrtm_psd(cs)
    cross = sqrtm_psd(a @ cg @ a)
    value = float(((mu_s - mu_g) ** 2).sum() + np.trace(cs) + np.trace(cg) - 2 * np.trace(cross))
    return max(value, 0.0)


# --------------------------------------------------------------------- report

@dataclass
class MetricReport:
    name: str
    values: list
    protocol: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.values:
            raise ValueError("a metric report needs at least one repeat")

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def std(self):
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    def to_dict(self):
        return {"metric": self.name, "mean": self.mean, "std": self.std,
                "repeats": len(self.values), "values": [float(v) for v in self.values],
                "protocol": self.protocol}
