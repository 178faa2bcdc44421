"""Program execution into CSG solids over signed distance fields."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..cadlang import CUT, INTERSECT, JOIN, NEW, TWO_SIDED, CadSequence, sketch_loops
from .profile import ExtrudeSpec, GeometryError, Primitive, SketchPlane, build_profile

DEFAULT_RESOLUTION = 64
BOUNDS_MARGIN = 0.05


@dataclass(frozen=True)
class CsgNode:
    op: str  # "join" | "cut" | "intersect"
    left: object
    right: object

    def sdf(self, pts):
        a = self.left.sdf(pts)
        b = self.right.sdf(pts)
        if self.op == "join":
            return np.minimum(a, b)
        if self.op == "cut":
            return np.maximum(a, -b)
        if self.op == "intersect":
            return np.maximum(a, b)
        raise GeometryError(f"unknown boolean {self.op!r}")

    def leaves(self):
        for child in (self.left, self.right):
            if isinstance(child, CsgNode):
                yield from child.leaves()
            else:
                yield child


def _leaves(node):
    return list(node.leaves()) if isinstance(node, CsgNode) else [node]


@dataclass(frozen=True)
class SolidModel:
    csg: object
    bounds: tuple  # (lo[3], hi[3]) after inflation

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return self.csg.sdf(pts.reshape(-1, 3)).reshape(pts.shape[:-1])

    @property
    def primitives(self):
        return _leaves(self.csg)

    @property
    def diameter(self):
        lo, hi = self.bounds
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))

    def grid_axes(self, resolution=DEFAULT_RESOLUTION):
        lo, hi = self.bounds
        return [np.linspace(lo[k], hi[k], resolution) for k in range(3)]

    def grid(self, resolution=DEFAULT_RESOLUTION):
        """SDF sampled on a ``resolution**3`` lattice spanning the bounds (ij indexing)."""
        if resolution == DEFAULT_RESOLUTION:
            return self._default_grid
        return self._eval_grid(resolution)

    def _eval_grid(self, resolution, step=1):
        axes = [a[::step] for a in self.grid_axes(resolution)]
        n = len(axes[0])
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return self.csg.sdf(pts).reshape(n, n, n)

    @cached_property
    def _default_grid(self):
        return self._eval_grid(DEFAULT_RESOLUTION)

    def cell_size(self, resolution=DEFAULT_RESOLUTION):
        lo, hi = self.bounds
        return (np.asarray(hi) - np.asarray(lo)) / (resolution - 1)

    @property
    def is_valid(self):
        return is_valid(self)


def combine_bounds(boxes, margin=BOUNDS_MARGIN):
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    center, half = (lo + hi) / 2, (hi - lo) / 2 * (1 + margin)
    half = np.maximum(half, 1e-6)
    return tuple((center - half).tolist()), tuple((center + half).tolist())


def primitive_from_extrude(loops, cmd):
    profile = build_profile(loops)
    plane = SketchPlane((cmd["px"], cmd["py"], cmd["pz"]), cmd["theta"], cmd["phi"],
                        cmd["gamma"], cmd["s"])
    spec = ExtrudeSpec(cmd["e1"], cmd["e2"], int(cmd["b"]), cmd["u"] == TWO_SIDED)
    return Primitive(profile, plane, spec)


def execute(seq: CadSequence) -> SolidModel:
    """Replay a program into a CSG tree.

    The first extrusion must be ``new``; later ``new`` bodies are joined.
    An empty result is not an error: check :func:`is_valid`.
    """
    try:
        groups = sketch_loops(seq)
    except ValueError as exc:
        raise GeometryError(str(exc)) from None
    if not groups:
        raise GeometryError("program has no extrusion")
    body = None
    boxes = []
    for loops, cmd in groups:
        prim = primitive_from_extrude(loops, cmd)
        boxes.append(prim.bounds())
        op = int(cmd["b"])
        if body is None:
            if op != NEW:
                raise GeometryError(f"first extrusion must be 'new' (got op {op})")
            body = prim
        elif op in (NEW, JOIN):
            body = CsgNode("join", body, prim)
        elif op == CUT:
            body = CsgNode("cut", body, prim)
        elif op == INTERSECT:
            body = CsgNode("intersect", body, prim)
    return SolidModel(body, combine_bounds(boxes))


def _coarse_subset(resolution, max_nodes=24):
    """Largest sub-lattice size whose nodes are also nodes of the full lattice."""
    for c in range(max_nodes, 1, -1):
        if (resolution - 1) % (c - 1) == 0 and c < resolution:
            return c
    return None


def is_valid(solid, resolution=DEFAULT_RESOLUTION):
    """True when some lattice node lies strictly inside the solid.

    A coarse lattice made of every k-th node is probed first; it is a
    subset of the full lattice so a hit there is exact.
    """
    coarse = _coarse_subset(resolution)
    if coarse is not None and "_default_grid" not in vars(solid):
        if (solid._eval_grid(resolution, (resolution - 1) // (coarse - 1)) < 0).any():
            return True
    return bool((solid.grid(resolution) < 0).any())


@dataclass(frozen=True)
class VolumeEstimate:
    value: float
    stderr: float
    n_samples: int

    def __float__(self):
        return self.value


def volume_estimate(solid, n_samples=1_000_000, seed=0, chunk=200_000):
    """Monte Carlo volume over the bounding box with its standard error."""
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b) for b in solid.bounds)
    box = float(np.prod(hi - lo))
    hits = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        pts = lo + rng.random((m, 3)) * (hi - lo)
        hits += int((solid.sdf(pts) < 0).sum())
        done += m
    p = hits / n_samples
    return VolumeEstimate(box * p, box * math.sqrt(p * (1 - p) / n_samples), n_samples)
