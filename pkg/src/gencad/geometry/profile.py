"""Sketch profiles, sketch planes and extrusion primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..cadlang import (ARC_CCW, CLOSE_TOL, DEGENERATE_TOL, CadCommand,
                       CommandType, arc_is_degenerate, slab_interval)


class GeometryError(ValueError):
    """Raised when a program cannot be turned into geometry."""


@dataclass(frozen=True)
class Segment:
    kind: int  # kernels.LINE | ARC | CIRCLE
    start: tuple
    end: tuple
    center: tuple = (0.0, 0.0)
    radius: float = 0.0
    start_angle: float = 0.0
    sweep: float = 0.0  # signed, ccw positive

    def row(self):
        return [self.kind, *self.start, *self.end, *self.center, self.radius,
                self.start_angle, self.sweep]

    def bbox(self):
        if self.kind == kernels.LINE:
            xs, ys = (self.start[0], self.end[0]), (self.start[1], self.end[1])
            return min(xs), min(ys), max(xs), max(ys)
        cx, cy = self.center
        r = self.radius
        return cx - r, cy - r, cx + r, cy + r


def arc_from_endpoints(start, end, alpha, ccw=True):
    """Circular arc from ``start`` to ``end`` sweeping ``alpha`` radians."""
    if arc_is_degenerate(start, end, alpha):
        raise GeometryError(f"degenerate arc (sweep {alpha:.4g})")
    ax, ay = start
    bx, by = end
    dx, dy = bx - ax, by - ay
    chord = math.hypot(dx, dy)
    nx, ny = -dy / chord, dx / chord
    off = (chord / 2) / math.tan(alpha / 2)
    if not ccw:
        off = -off
    cx, cy = (ax + bx) / 2 + nx * off, (ay + by) / 2 + ny * off
    r = chord / (2 * math.sin(alpha / 2))
    a0 = math.atan2(ay - cy, ax - cx)
    return Segment(kernels.ARC, (ax, ay), (bx, by), (cx, cy), r, a0, alpha if ccw else -alpha)


@dataclass(frozen=True)
class Profile2D:
    loops: tuple  # tuple of tuples of Segment

    @property
    def segments(self):
        return [s for loop in self.loops for s in loop]

    def table(self):
        return np.array([s.row() for s in self.segments], dtype=np.float64).reshape(-1, kernels.SEG_COLS)

    def bbox(self):
        if not self.segments:
            return 0.0, 0.0, 0.0, 0.0
        boxes = np.array([s.bbox() for s in self.segments])
        return boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max()

    def sdf(self, q):
        return profile_sdf(self, q)


def build_loop(cmds):
    """Chain curve commands into segments; curve loops start at the sketch origin."""
    if not cmds:
        raise GeometryError("empty loop")
    if cmds[0].type == CommandType.Circle:
        if len(cmds) != 1:
            raise GeometryError("circle loop must contain exactly one command")
        c = cmds[0]
        if c["r"] < DEGENERATE_TOL:
            raise GeometryError("degenerate circle")
        return (Segment(kernels.CIRCLE, (c["x"], c["y"]), (c["x"], c["y"]),
                        (c["x"], c["y"]), c["r"], 0.0, 2 * math.pi),)
    segs = []
    pos = (0.0, 0.0)
    for k, c in enumerate(cmds):
        if c.type not in (CommandType.Line, CommandType.Arc):
            raise GeometryError(f"{c.type.name} inside a curve loop")
        end = (c["x"], c["y"])
        if math.hypot(end[0] - pos[0], end[1] - pos[1]) < DEGENERATE_TOL:
            raise GeometryError("zero-length segment")
        if k == len(cmds) - 1:
            if math.hypot(*end) > CLOSE_TOL:
                raise GeometryError("open loop")
            end = (0.0, 0.0)  # snap closure
            if math.hypot(*pos) < DEGENERATE_TOL:
                break  # already closed; the sliver would be degenerate
        if c.type == CommandType.Line:
            segs.append(Segment(kernels.LINE, pos, end))
        else:
            segs.append(arc_from_endpoints(pos, end, c["alpha"], c["f"] == ARC_CCW))
        pos = end
    return tuple(segs)


def build_profile(loop_commands):
    """Build a profile from a list of loops (each a list of curve commands).

    A flat command list with ``SOL`` separators is accepted as well.
    """
    if loop_commands and isinstance(loop_commands[0], CadCommand):
        loops, cur = [], None
        for c in loop_commands:
            if c.type == CommandType.SOL:
                cur = []
                loops.append(cur)
            else:
                if cur is None:
                    cur = []
                    loops.append(cur)
                cur.append(c)
        loop_commands = loops
    if not loop_commands:
        raise GeometryError("profile without loops")
    return Profile2D(tuple(build_loop(list(l)) for l in loop_commands))


def profile_sdf(profile, q):
    """Even-odd signed distance: negative inside material, exact magnitude."""
    q = np.asarray(q, dtype=np.float64)
    out = kernels.profile_sdf(q.reshape(-1, 2), profile.table())
    return out.reshape(q.shape[:-1]) if q.ndim > 1 else float(out[0])


# ---------------------------------------------------------------- planes

def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation(theta, phi, gamma):
    """Sketch-frame rotation; the one place the angle convention lives."""
    return _rz(phi) @ _ry(theta) @ _rz(gamma)


@dataclass(frozen=True)
class SketchPlane:
    origin: tuple = (0.0, 0.0, 0.0)
    theta: float = 0.0
    phi: float = 0.0
    gamma: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("sketch scale must be positive")

    @property
    def R(self):
        return rotation(self.theta, self.phi, self.gamma)

    def is_axis_aligned(self, tol=1e-6):
        r = np.abs(self.R)
        return bool(np.all((r < tol) | (np.abs(r - 1) < tol)))


@dataclass(frozen=True)
class RigidTransform:
    """``world = origin + R @ (s*u, s*v, w)``."""

    R: np.ndarray
    origin: np.ndarray
    scale: float

    def to_world(self, local):
        local = np.asarray(local, dtype=np.float64)
        scaled = local * np.array([self.scale, self.scale, 1.0])
        return scaled @ self.R.T + self.origin

    def to_local(self, world):
        world = np.asarray(world, dtype=np.float64)
        frame = (world - self.origin) @ self.R
        return frame / np.array([self.scale, self.scale, 1.0])


def plane_transform(plane):
    return RigidTransform(plane.R, np.asarray(plane.origin, dtype=np.float64), float(plane.scale))


@dataclass(frozen=True)
class ExtrudeSpec:
    e1: float
    e2: float = 0.0
    boolean_op: int = 0
    two_sided: bool = False

    @property
    def slab(self):
        return slab_interval(self.e1, self.e2, self.two_sided)

    @property
    def thickness(self):
        lo, hi = self.slab
        return hi - lo


@dataclass(frozen=True)
class Primitive:
    """Extruded profile: ``max(s * profile_sdf(uv / s), |w - c| - h)`` in the sketch frame."""

    profile: Profile2D
    plane: SketchPlane
    spec: ExtrudeSpec

    def __post_init__(self):
        if self.spec.thickness <= DEGENERATE_TOL:
            raise GeometryError(f"degenerate solid: slab thickness {self.spec.thickness:.4g}")
        object.__setattr__(self, "_table", self.profile.table())
        object.__setattr__(self, "_xf", plane_transform(self.plane))

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        xf = self._xf
        frame = (pts - xf.origin) @ xf.R
        s = xf.scale
        d2 = s * kernels.profile_sdf(frame[:, :2] / s, self._table)
        lo, hi = self.spec.slab
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        dw = np.abs(frame[:, 2] - c) - h
        return np.maximum(d2, dw)

    def bounds(self):
        u0, v0, u1, v1 = self.profile.bbox()
        lo, hi = self.spec.slab
        corners = np.array([[u, v, w] for u in (u0, u1) for v in (v0, v1) for w in (lo, hi)])
        world = self._xf.to_world(corners)
        return world.min(0), world.max(0)


def extrude(profile, plane, spec):
    return Primitive(profile, plane, spec)
