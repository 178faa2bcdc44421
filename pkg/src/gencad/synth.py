"""Procedural corpus of small sketch-and-extrude programs.

Every value is snapped to its quantization grid, so a program survives an
encode/decode roundtrip unchanged. Programs that the kernel rejects or that
produce an empty solid are resampled; the output is a pure function of the
seed.
"""
from __future__ import annotations

import math

import numpy as np

from .cadlang import (ARC_CCW, ARC_CW, CUT, INTERSECT, JOIN, NEW, SLOT_INDEX, CadCommand,
                      CadSequence, snap, validate)
from .geometry import GeometryError, execute, is_valid

_X, _Y, _ALPHA, _R = (SLOT_INDEX[k] for k in ("x", "y", "alpha", "r"))
_E1, _PX, _S = SLOT_INDEX["e1"], SLOT_INDEX["px"], SLOT_INDEX["s"]
_THETA, _PHI, _GAMMA = SLOT_INDEX["theta"], SLOT_INDEX["phi"], SLOT_INDEX["gamma"]

# (theta, phi, gamma) for the three principal planes, both facing directions
_PLANES = (
    (0.0, 0.0, 0.0),
    (math.pi, 0.0, 0.0),
    (math.pi / 2, 0.0, 0.0),
    (math.pi / 2, math.pi / 2, 0.0),
    (math.pi / 2, -math.pi / 2, 0.0),
    (math.pi / 2, 0.0, math.pi / 2),
)


def _xy(v):
    return snap(v, _X)


# 0 is not on the 8-bit grid of [-1, 1]; loops close within tolerance of it
_Z = _xy(0.0)


def _pt(rng, lo, hi):
    return _xy(rng.uniform(lo, hi))


def _rect(rng):
    w, h = _pt(rng, 0.3, 0.9), _pt(rng, 0.3, 0.9)
    sx, sy = rng.choice([-1, 1], 2)
    w, h = _xy(sx * w), _xy(sy * h)
    return [CadCommand.line(w, _Z), CadCommand.line(w, h), CadCommand.line(_Z, h),
            CadCommand.line(_Z, _Z)]


def _triangle(rng):
    a = _pt(rng, 0.4, 0.9)
    b, c = _pt(rng, -0.3, 0.6), _pt(rng, 0.4, 0.9)
    return [CadCommand.line(a, _Z), CadCommand.line(b, c), CadCommand.line(_Z, _Z)]


def _rounded(rng):
    """Rectangle whose far side is a semicircular arc bulging outward."""
    w, h = _pt(rng, 0.3, 0.7), _pt(rng, 0.3, 0.7)
    # going up the right edge counter-clockwise bulges to the right of the chord
    return [CadCommand.line(w, _Z),
            CadCommand.arc(w, h, snap(math.pi, _ALPHA), ARC_CCW),
            CadCommand.line(_Z, h), CadCommand.line(_Z, _Z)]


def _slot(rng):
    """Two lines and two arcs: a stadium shape with mixed arc directions."""
    w, h = _pt(rng, 0.3, 0.7), _pt(rng, 0.2, 0.5)
    alpha = snap(rng.choice([math.pi / 2, math.pi]), _ALPHA)
    return [CadCommand.line(w, _Z), CadCommand.arc(w, h, alpha, ARC_CCW),
            CadCommand.line(_Z, h), CadCommand.arc(_Z, _Z, alpha, ARC_CCW)]


def _notch(rng):
    """Rectangle with an inward arc on its far side."""
    w, h = _pt(rng, 0.5, 0.9), _pt(rng, 0.4, 0.9)
    alpha = snap(math.pi / 2, _ALPHA)
    return [CadCommand.line(w, _Z), CadCommand.arc(w, h, alpha, ARC_CW),
            CadCommand.line(_Z, h), CadCommand.line(_Z, _Z)]


def _circle(rng):
    r = snap(rng.uniform(0.2, 0.6), _R)
    return [CadCommand.circle(_pt(rng, -0.3, 0.3), _pt(rng, -0.3, 0.3), r)]


_LOOPS = (_rect, _triangle, _rounded, _slot, _notch, _circle)


def _hole_for(rng, outer):
    """A small circle inside the first quadrant box of a positive rectangle."""
    xs = [c.params[_X] for c in outer]
    ys = [c.params[_Y] for c in outer]
    xmin, xmax, ymin, ymax = min(xs + [0]), max(xs + [0]), min(ys + [0]), max(ys + [0])
    r = snap(min(xmax - xmin, ymax - ymin) * rng.uniform(0.15, 0.3), _R)
    if r <= 0.02:
        return None
    cx = _xy((xmin + xmax) / 2)
    cy = _xy((ymin + ymax) / 2)
    return [CadCommand.circle(cx, cy, r)]


def _profile(rng):
    kind = rng.integers(len(_LOOPS))
    outer = _LOOPS[kind](rng)
    loops = [outer]
    if _LOOPS[kind] is _rect and rng.random() < 0.4:
        hole = _hole_for(rng, outer)
        if hole is not None:
            loops.append(hole)
    return loops


def _extrude(rng, op, first):
    theta, phi, gamma = _PLANES[0 if first and rng.random() < 0.5 else rng.integers(len(_PLANES))]
    origin = tuple(snap(v, _PX) for v in rng.uniform(-0.4, 0.4, 3))
    s = snap(rng.uniform(0.6, 1.4), _S)
    two = bool(rng.random() < 0.25)
    e1 = snap(rng.uniform(0.1, 0.6), _E1)
    e2 = snap(rng.uniform(0.1, 0.4) if two else 0.0, _E1)
    return CadCommand.extrude(e1, e2, theta=snap(theta, _THETA), phi=snap(phi, _PHI),
                              gamma=snap(gamma, _GAMMA), origin=origin, s=s, op=op,
                              two_sided=two)


def sample_program(rng, max_extrudes=4):
    n_ext = int(rng.integers(1, max_extrudes + 1))
    cmds = []
    for k in range(n_ext):
        op = NEW if k == 0 else int(rng.choice([JOIN, CUT, INTERSECT, NEW], p=[0.45, 0.3, 0.1, 0.15]))
        for loop in _profile(rng):
            cmds.append(CadCommand.sol())
            cmds.extend(loop)
        cmds.append(_extrude(rng, op, k == 0))
    return CadSequence(tuple(cmds))


def is_kernel_valid(seq):
    if not validate(seq).ok:
        return False
    try:
        return is_valid(execute(seq))
    except GeometryError:
        return False


def synth_corpus(n, seed=0, max_extrudes=4, max_tries=100):
    """``n`` valid programs; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        for _ in range(max_tries):
            seq = sample_program(rng, max_extrudes)
            if is_kernel_valid(seq):
                out.append(seq)
                break
        else:
            raise RuntimeError(f"could not sample a valid program in {max_tries} tries")
    return out
