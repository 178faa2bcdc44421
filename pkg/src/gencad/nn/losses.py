import numpy as np

from .core import log_softmax


def cross_entropy(logits, target, reduction="sum"):
    """Softmax cross-entropy over the last axis.

    Returns ``(loss, dlogits)``. ``target`` holds class indices with the
    leading shape of ``logits``.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {target.shape}")
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    t = target.reshape(-1)
    logp = log_softmax(flat, -1)
    rows = np.arange(len(t))
    loss = -logp[rows, t].sum()
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    if reduction == "mean":
        denom = max(len(t), 1)
        loss, grad = loss / denom, grad / denom
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad.reshape(logits.shape).astype(logits.dtype, copy=False)


def mse(a, b):
    """Mean squared error and its gradient with respect to ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float((diff * diff).mean()), (2.0 / max(diff.size, 1)) * diff
