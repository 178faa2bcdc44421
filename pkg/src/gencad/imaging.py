"""Conditioning images: isometric renders, canny sketches, axis-scale
augmentation and encoder preprocessing.

Images are plain 2-D numpy arrays: ``uint8`` for renders and sketches,
``float32`` after :func:`preprocess_for_encoder`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .cadlang import CadCommand, CadSequence, CommandType, validate
from .geometry import GeometryError, SketchPlane, execute, is_valid

RENDER_SIZE = 448
ENCODER_SIZE = 256
MAX_STEPS = 128
VIEW_DIR = -np.ones(3) / math.sqrt(3.0)
# Off-axis key light: a light along the view direction would give the three
# visible faces of an axis-aligned box the same shade.
LIGHT_DIR = np.array([1.0, 2.0, 3.0]) / math.sqrt(14.0)
AMBIENT = 0.2


def camera_basis(view=VIEW_DIR):
    view = view / np.linalg.norm(view)
    z = np.array([0.0, 0.0, 1.0])
    up = z - z.dot(view) * view
    up /= np.linalg.norm(up)
    right = np.cross(view, up)
    return right, up, view


def _ray_box(origins, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tnear = np.minimum(t0, t1).max(1)
    tfar = np.maximum(t0, t1).min(1)
    return np.maximum(tnear, 0.0), tfar


def render_isometric(solid, size=RENDER_SIZE, max_steps=MAX_STEPS):
    """Orthographic sphere-traced render looking down ``-(1,1,1)``.

    Background pixels are exactly 0; hit pixels are Lambertian-shaded with
    an ambient floor so they are never 0.
    """
    if not is_valid(solid):
        raise GeometryError("cannot render empty solid")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in solid.bounds)
    center = (lo + hi) / 2
    radius = np.linalg.norm(hi - lo) / 2
    eps = 1e-3 * 2 * radius
    right, up, view = camera_basis()

    coords = (np.arange(size) + 0.5) / size * 2 - 1
    xs, ys = np.meshgrid(coords * radius, -coords * radius)
    origins = (center + xs.reshape(-1, 1) * right + ys.reshape(-1, 1) * up
               - 1.01 * radius * view)
    tnear, tfar = _ray_box(origins, view, lo, hi)
    t = tnear.copy()
    active = np.flatnonzero(tnear < tfar)
    hit = np.zeros(len(origins), dtype=bool)
    for _ in range(max_steps):
        if not len(active):
            break
        p = origins[active] + t[active, None] * view
        d = solid.sdf(p)
        done = d < eps
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, d)
        keep = ~done & (t[active] <= tfar[active])
        active = active[keep]

    img = np.zeros(len(origins), dtype=np.uint8)
    idx = np.flatnonzero(hit)
    if len(idx):
        p = origins[idx] + t[idx, None] * view
        h = eps
        grad = np.empty((len(idx), 3))
        for k in range(3):
            off = np.zeros(3)
            off[k] = h
            grad[:, k] = solid.sdf(p + off) - solid.sdf(p - off)
        grad /= np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
        lam = np.clip(grad @ LIGHT_DIR, 0.0, 1.0)
        shade = AMBIENT + (1 - AMBIENT) * lam
        img[idx] = np.clip(np.rint(shade * 255), 1, 255).astype(np.uint8)
    return img.reshape(size, size)


# ----------------------------------------------------------------- sketches

def _as_float(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def gaussian_blur(img, sigma=1.0):
    """Gaussian blur with zero padding; returns floats."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="constant")


def canny(img, sigma=1.4, low=0.1, high=0.3):
    """Binary edge map (0/255) with thresholds relative to the peak gradient."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 <= low < high:
        raise ValueError("need 0 <= low < high")
    smooth = ndimage.gaussian_filter(_as_float(img), sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    out = np.zeros(mag.shape, dtype=np.uint8)
    if peak <= 1e-12:
        return out
    thin = kernels.non_max_suppression(mag, gx, gy)
    weak = thin >= low * peak
    strong = thin >= high * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n:
        keep = np.zeros(n + 1, dtype=bool)
        keep[np.unique(labels[strong])] = True
        keep[0] = False
        out[keep[labels]] = 255
    return out


def make_sketch(img, sigma_pre=1.4, low=0.1, high=0.3, blur_sigma=1.0):
    """Canny edges followed by a Gaussian blur, as ``uint8``."""
    edges = canny(img, sigma_pre, low, high)
    blurred = gaussian_blur(edges, blur_sigma)
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


# --------------------------------------------------------- encoder preprocess

def resize_bilinear(img, size):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = (size, size) if np.isscalar(size) else size
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def center_crop(img, size):
    h, w = img.shape
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def preprocess_for_encoder(img, size=ENCODER_SIZE):
    """Resize to ``size`` square, center crop, then map [0,1] to [-1,1]."""
    x = _as_float(img)
    if x.shape != (size, size):
        x = resize_bilinear(x, size)
    x = center_crop(x, size)
    return ((x - 0.5) / 0.5).astype(np.float32)


# ------------------------------------------------------- scale augmentation

DEFAULT_SCALE_FACTORS = ((1.0, 1.0, 1.0), (1.25, 1.0, 1.0), (1.0, 1.25, 1.0),
                         (1.0, 1.0, 1.25), (0.8, 0.8, 0.8))


@dataclass(frozen=True)
class ScaleVariant:
    factor: tuple
    sequence: CadSequence | None
    reason: str = ""

    @property
    def ok(self):
        return self.sequence is not None


def _axis_of(v):
    return int(np.argmax(np.abs(v)))


def _scale_group(loops, ext, k):
    plane = SketchPlane((ext["px"], ext["py"], ext["pz"]), ext["theta"], ext["phi"],
                        ext["gamma"], ext["s"])
    R = plane.R
    origin = [ext[n] * k[i] for i, n in enumerate(("px", "py", "pz"))]
    if plane.is_axis_aligned():
        ku, kv, kw = (k[_axis_of(R[:, c])] for c in range(3))
    else:
        ku = kv = 1.0
        kw = float(np.linalg.norm(np.asarray(k) * R[:, 2]))
    m = max(ku, kv)
    new_loops = loops
    if ku != kv:
        if any(c.type != CommandType.Line for loop in loops for c in loop):
            raise ValueError("anisotropic in-plane scaling of a curved profile")
        new_loops = [[c.replace(x=c["x"] * ku / m, y=c["y"] * kv / m) for c in loop]
                     for loop in loops]
    new_ext = ext.replace(px=origin[0], py=origin[1], pz=origin[2], s=ext["s"] * m,
                          e1=ext["e1"] * kw, e2=ext["e2"] * kw)
    return new_loops, new_ext


def scale_sequence(seq, factor):
    """Rescale a program along world axes. Raises ValueError when unrepresentable."""
    out = []
    loops, cur = [], None
    for c in seq.commands:
        if c.type == CommandType.SOL:
            cur = []
            loops.append(cur)
        elif c.type in (CommandType.Line, CommandType.Arc, CommandType.Circle):
            cur.append(c)
        elif c.type == CommandType.Extrude:
            new_loops, new_ext = _scale_group(loops, c, factor)
            for loop in new_loops:
                out.append(CadCommand.sol())
                out.extend(loop)
            out.append(new_ext)
            loops, cur = [], None
    return CadSequence(tuple(out), seq.padded_len)


def scale_variants(seq, factors=DEFAULT_SCALE_FACTORS):
    """One :class:`ScaleVariant` per factor; failed ones carry ``sequence=None`` and a reason."""
    variants = []
    for f in factors:
        f = tuple(float(v) for v in f)
        try:
            scaled = scale_sequence(seq, f)
        except ValueError as exc:
            variants.append(ScaleVariant(f, None, str(exc)))
            continue
        report = validate(scaled)
        if not report.ok:
            variants.append(ScaleVariant(f, None, "invalid program: " + "; ".join(report.rules)))
            continue
        try:
            solid = execute(scaled)
        except GeometryError as exc:
            variants.append(ScaleVariant(f, None, f"kernel error: {exc}"))
            continue
        if not is_valid(solid):
            variants.append(ScaleVariant(f, None, "empty solid"))
            continue
        variants.append(ScaleVariant(f, scaled))
    return variants


# ---------------------------------------------------------------------- I/O

def write_pgm(img, path):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("PGM export expects uint8 pixels")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = blob[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
