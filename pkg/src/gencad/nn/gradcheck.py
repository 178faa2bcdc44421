"""Central finite-difference verification of explicit backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str  # "param:<name>[idx]" or "input:<k>[idx]"
    n_checked: int

    def passed(self, tol):
        return self.max_rel_error < tol


def rel_error(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(module, inputs, eps=1e-5, seed=0, check_inputs=True, floor=1e-3,
                      max_entries=None):
    """Compare analytic gradients with central differences in float64.

    ``module.forward(*inputs)`` may return any array; the scalar probed is
    ``sum(out * dout)`` for a fixed random ``dout``. Input gradients are
    checked for float inputs when ``backward`` returns them. Relative error
    uses ``max(|analytic|, |numeric|, floor)`` as denominator so entries
    that are zero by construction do not divide by rounding noise.
    """
    rng = np.random.default_rng(seed)
    module.to(np.float64)
    inputs = [np.asarray(x, dtype=np.float64) if np.asarray(x).dtype.kind == "f" else x
              for x in inputs]

    out = module.forward(*inputs)
    dout = rng.standard_normal(np.shape(out))

    def f():
        return float((np.asarray(module.forward(*inputs)) * dout).sum())

    module.zero_grad()
    module.forward(*inputs)
    dx = module.backward(dout)
    if not isinstance(dx, (tuple, list)):
        dx = (dx,)

    worst, worst_at, count = 0.0, "", 0

    def probe(arr, analytic, label):
        nonlocal worst, worst_at, count
        flat_idx = range(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, max_entries, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * eps)
            err = float(rel_error(analytic[idx], num, floor))
            count += 1
            if err > worst:
                worst, worst_at = err, f"{label}{[int(i) for i in idx]}"

    for name, p in module.named_parameters():
        probe(p.data, p.grad.copy(), f"param:{name}")
    if check_inputs:
        for k, (x, g) in enumerate(zip(inputs, dx)):
            if g is None or not isinstance(x, np.ndarray) or x.dtype.kind != "f":
                continue
            probe(x, np.asarray(g).copy(), f"input:{k}")
    return GradCheckResult(worst, worst_at, count)
