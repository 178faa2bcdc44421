"""Hot loops, each with a numba kernel and a numpy twin.

Dispatch happens per call through :mod:`gencad._accel`, so flipping
``GENCAD_DISABLE_NUMBA`` (or :func:`gencad._accel.set_backend`) switches
every caller. Both paths must agree to rounding; ``tests/test_kernels.py``
pins that.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

# Segment table columns.
SEG_KIND, SEG_AX, SEG_AY, SEG_BX, SEG_BY, SEG_CX, SEG_CY, SEG_R, SEG_A0, SEG_SWEEP = range(10)
SEG_COLS = 10
LINE, ARC, CIRCLE = 0, 1, 2
TWO_PI = 2.0 * math.pi


# ------------------------------------------------------------ profile SDF

@njit
def _profile_sdf_numba(pts, segs):
    m = pts.shape[0]
    out = np.empty(m)
    for i in range(m):
        px = pts[i, 0]
        py = pts[i, 1]
        best = np.inf
        inside = False
        for k in range(segs.shape[0]):
            kind = int(segs[k, 0])
            ax = segs[k, 1]
            ay = segs[k, 2]
            bx = segs[k, 3]
            by = segs[k, 4]
            cx = segs[k, 5]
            cy = segs[k, 6]
            r = segs[k, 7]
            if kind == 2:
                dc = math.hypot(px - cx, py - cy)
                d = abs(dc - r)
                if dc < r:
                    inside = not inside
            else:
                # chord crossing, half-open in y
                if (ay > py) != (by > py):
                    xi = ax + (py - ay) * (bx - ax) / (by - ay)
                    if xi > px:
                        inside = not inside
                if kind == 0:
                    ex = bx - ax
                    ey = by - ay
                    ll = ex * ex + ey * ey
                    t = ((px - ax) * ex + (py - ay) * ey) / ll
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    d = math.hypot(px - ax - t * ex, py - ay - t * ey)
                else:
                    sweep = segs[k, 9]
                    dc = math.hypot(px - cx, py - cy)
                    ang = math.atan2(py - cy, px - cx)
                    if sweep > 0:
                        rel = (ang - segs[k, 8]) % TWO_PI
                    else:
                        rel = (segs[k, 8] - ang) % TWO_PI
                    if rel <= abs(sweep):
                        d = abs(dc - r)
                    else:
                        d = min(math.hypot(px - ax, py - ay), math.hypot(px - bx, py - by))
                    # circular segment between chord and arc; ccw arcs bulge right
                    if dc < r:
                        cr = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                        if (sweep > 0 and cr < 0.0) or (sweep < 0 and cr > 0.0):
                            inside = not inside
            if d < best:
                best = d
        out[i] = -best if inside else best
    return out


def _profile_sdf_numpy(pts, segs):
    px, py = pts[:, 0], pts[:, 1]
    best = np.full(len(pts), np.inf)
    inside = np.zeros(len(pts), dtype=bool)
    for seg in segs:
        kind = int(seg[SEG_KIND])
        ax, ay, bx, by, cx, cy, r, a0, sweep = seg[1:10]
        if kind == CIRCLE:
            dc = np.hypot(px - cx, py - cy)
            d = np.abs(dc - r)
            inside ^= dc < r
        else:
            straddle = (ay > py) != (by > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= straddle & (xi > px)
            if kind == LINE:
                ex, ey = bx - ax, by - ay
                t = np.clip(((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey), 0.0, 1.0)
                d = np.hypot(px - ax - t * ex, py - ay - t * ey)
            else:
                dc = np.hypot(px - cx, py - cy)
                ang = np.arctan2(py - cy, px - cx)
                rel = np.mod(ang - a0, TWO_PI) if sweep > 0 else np.mod(a0 - ang, TWO_PI)
                ends = np.minimum(np.hypot(px - ax, py - ay), np.hypot(px - bx, py - by))
                d = np.where(rel <= abs(sweep), np.abs(dc - r), ends)
                cr = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                bulge = cr < 0.0 if sweep > 0 else cr > 0.0
                inside ^= (dc < r) & bulge
        best = np.minimum(best, d)
    return np.where(inside, -best, best)


def profile_sdf(pts, segs):
    """Signed distance of 2D points to an even-odd profile given as a segment table."""
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    segs = np.ascontiguousarray(segs, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _profile_sdf_numba(pts, segs)
    return _profile_sdf_numpy(pts, segs)


# ----------------------------------------------------- nearest neighbours

@njit
def _nn_sqdist_numba(x, y):
    n = x.shape[0]
    out = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(y.shape[0]):
            d0 = x[i, 0] - y[j, 0]
            d1 = x[i, 1] - y[j, 1]
            d2 = x[i, 2] - y[j, 2]
            d = d0 * d0 + d1 * d1 + d2 * d2
            if d < best:
                best = d
                bj = j
        out[i] = best
        idx[i] = bj
    return out, idx


def _nn_sqdist_numpy(x, y, chunk=512):
    out = np.empty(len(x))
    idx = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), chunk):
        xs = x[s:s + chunk]
        d = ((xs[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        j = d.argmin(1)
        idx[s:s + chunk] = j
        out[s:s + chunk] = d[np.arange(len(xs)), j]
    return out, idx


def nn_sqdist_brute(x, y):
    """Brute-force nearest neighbour of each row of ``x`` in ``y``.

    Returns ``(squared distances, indices)``; first minimum wins ties.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _nn_sqdist_numba(x, y)
    return _nn_sqdist_numpy(x, y)


# ------------------------------------------------- canny non-max suppression

@njit
def _nms_numba(mag, gx, gy):
    h, w = mag.shape
    out = np.zeros_like(mag)
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            m = mag[i, j]
            if m == 0.0:
                continue
            ang = math.atan2(gy[i, j], gx[i, j]) * 180.0 / math.pi
            if ang < 0:
                ang += 180.0
            if ang < 22.5 or ang >= 157.5:
                a = mag[i, j - 1]
                b = mag[i, j + 1]
            elif ang < 67.5:
                a = mag[i - 1, j - 1]
                b = mag[i + 1, j + 1]
            elif ang < 112.5:
                a = mag[i - 1, j]
                b = mag[i + 1, j]
            else:
                a = mag[i - 1, j + 1]
                b = mag[i + 1, j - 1]
            # asymmetric tie-break keeps one pixel of a symmetric ridge
            if m >= a and m > b:
                out[i, j] = m
    return out


def _nms_numpy(mag, gx, gy):
    ang = np.degrees(np.arctan2(gy, gx))
    ang = np.where(ang < 0, ang + 180.0, ang)
    p = np.pad(mag, 1)
    c = p[1:-1, 1:-1]
    pairs = [
        (p[1:-1, :-2], p[1:-1, 2:]),      # horizontal gradient
        (p[:-2, :-2], p[2:, 2:]),          # 45
        (p[:-2, 1:-1], p[2:, 1:-1]),      # vertical
        (p[:-2, 2:], p[2:, :-2]),          # 135
    ]
    sector = np.select([(ang < 22.5) | (ang >= 157.5), ang < 67.5, ang < 112.5], [0, 1, 2], 3)
    a = np.choose(sector, [q[0] for q in pairs])
    b = np.choose(sector, [q[1] for q in pairs])
    keep = (c > 0) & (c >= a) & (c > b)
    out = np.where(keep, c, 0.0)
    out[0, :] = out[-1, :] = 0.0
    out[:, 0] = out[:, -1] = 0.0
    return out


def non_max_suppression(mag, gx, gy):
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _nms_numba(mag, gx, gy)
    return _nms_numpy(mag, gx, gy)


# --------------------------------------------------- cyclic Jacobi eigensolver

@njit
def _jacobi_numba(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if math.sqrt(off) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(a).copy(), v


def _jacobi_numpy(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        if math.sqrt(float((a[iu] ** 2).sum())) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(a).copy(), v


def jacobi_eigh(a, tol=1e-10, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm drops below ``tol`` (scaled by
    the matrix norm). Returns ``(eigenvalues, eigenvectors)`` unsorted.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    scale = max(float(np.abs(a).max(initial=0.0)), 1e-300)
    if _accel.USE_NUMBA:
        return _jacobi_numba(a, tol * scale, max_sweeps)
    return _jacobi_numpy(a, tol * scale, max_sweeps)
