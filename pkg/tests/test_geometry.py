import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gencad import kernels
from gencad.cadlang import CadCommand, CadSequence
from gencad.geometry import (CsgNode, GeometryError, execute, extract_mesh, is_valid,
                             normalize, read_obj, read_pc, read_xyz, rotation, sample_surface,
                             volume_estimate, write_obj, write_pc, write_stl, write_xyz)
from gencad.synth import synth_corpus
from conftest import box_program, bracket_program, cylinder_program


# ----------------------------------------------------------- ray-cast oracle
# Written against segment geometry only: no distance function is used.

def _crossings_up(px, py, seg):
    """Crossings of the ray from (px, py) towards +y with one segment."""
    kind = seg.kind
    if kind == kernels.LINE:
        (ax, ay), (bx, by) = seg.start, seg.end
        if (ax > px) == (bx > px):
            return 0
        y = ay + (px - ax) * (by - ay) / (bx - ax)
        return int(y > py)
    cx, cy = seg.center
    r = seg.radius
    dx = px - cx
    if abs(dx) >= r:
        return 0
    h = math.sqrt(r * r - dx * dx)
    n = 0
    for y in (cy - h, cy + h):
        if y <= py:
            continue
        if kind == kernels.CIRCLE:
            n += 1
            continue
        ang = math.atan2(y - cy, dx)
        rel = (ang - seg.start_angle) * (1 if seg.sweep > 0 else -1) % (2 * math.pi)
        n += rel < abs(seg.sweep)
    return n


def _in_profile(profile, u, v):
    return sum(_crossings_up(u, v, s) for s in profile.segments) % 2 == 1


def _in_primitive(prim, p):
    xf = prim._xf
    local = (np.asarray(p) - xf.origin) @ xf.R
    lo, hi = prim.spec.slab
    if not lo < local[2] < hi:
        return False
    return _in_profile(prim.profile, local[0] / xf.scale, local[1] / xf.scale)


def inside_oracle(node, p):
    if isinstance(node, CsgNode):
        a, b = inside_oracle(node.left, p), inside_oracle(node.right, p)
        return {"join": a or b, "cut": a and not b, "intersect": a and b}[node.op]
    return _in_primitive(node, p)


def _oracle_shapes():
    shapes = [box_program(), cylinder_program(), bracket_program()]
    shapes += synth_corpus(7, seed=11)
    return shapes


def test_sdf_sign_matches_ray_cast_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for seq in _oracle_shapes():
        solid = execute(seq)
        lo, hi = (np.asarray(b) for b in solid.bounds)
        pts = lo + rng.random((2000, 3)) * (hi - lo)
        d = solid.sdf(pts)
        keep = np.abs(d) > 1e-9  # measure-zero boundary points carry no sign
        want = np.array([inside_oracle(solid.csg, p) for p in pts[keep]])
        mismatches += int(((d[keep] < 0) != want).sum())
    assert mismatches == 0


# -------------------------------------------------------------------- basics

def test_cube_and_cylinder_volumes():
    cube = volume_estimate(execute(box_program()), 200_000)
    assert abs(cube.value - 1.0) < 4 * cube.stderr + 1e-3
    cyl = volume_estimate(execute(cylinder_program()), 200_000)
    assert abs(cyl.value - math.pi / 4) < 4 * cyl.stderr + 1e-3


def test_boolean_volumes():
    a = CadSequence((CadCommand.sol(), CadCommand.line(1, 0), CadCommand.line(1, 1),
                     CadCommand.line(0, 1), CadCommand.line(0, 0), CadCommand.extrude(1.0),
                     CadCommand.sol(), CadCommand.circle(0.5, 0.5, 0.25),
                     CadCommand.extrude(1.0, op=2)))
    v = volume_estimate(execute(a), 200_000)
    want = 1 - math.pi * 0.25 ** 2
    assert abs(v.value - want) < 4 * v.stderr + 1e-3


def test_sdf_is_exact_inside_a_box():
    solid = execute(box_program())
    pts = np.array([[0.5, 0.5, 0.5], [0.1, 0.5, 0.5], [0.5, 0.5, 0.95], [1.5, 0.5, 0.5]])
    np.testing.assert_allclose(solid.sdf(pts), [-0.5, -0.1, -0.05, 0.5], atol=1e-12)


def test_rotation_is_orthonormal():
    r = rotation(0.3, -1.2, 2.0)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(r), 1.0)


def test_two_sided_extrusion_spans_both_sides():
    seq = CadSequence((CadCommand.sol(), CadCommand.circle(0, 0, 0.3),
                       CadCommand.extrude(0.2, 0.4, two_sided=True)))
    s = execute(seq)
    assert s.sdf(np.array([[0, 0, -0.35]]))[0] < 0
    assert s.sdf(np.array([[0, 0, 0.25]]))[0] > 0


def test_empty_intersection_is_invalid_not_an_error():
    seq = CadSequence((
        CadCommand.sol(), CadCommand.circle(0, 0, 0.2), CadCommand.extrude(0.2),
        CadCommand.sol(), CadCommand.circle(0, 0, 0.2),
        CadCommand.extrude(0.2, origin=(0.0, 0.0, 0.6), op=3),
    ))
    assert not is_valid(execute(seq))


def test_kernel_errors():
    with pytest.raises(GeometryError):
        execute(CadSequence((CadCommand.sol(), CadCommand.circle(0, 0, 0.2),
                             CadCommand.extrude(0.2, op=1))))
    with pytest.raises(GeometryError):
        execute(CadSequence(()))


def test_cube_mesh_area():
    mesh = extract_mesh(execute(box_program()), 64)
    assert abs(mesh.area - 6.0) / 6.0 < 0.03


@given(st.integers(0, 10_000))
def test_surface_samples_lie_near_the_surface(seed):
    solid = execute(cylinder_program())
    cloud = sample_surface(solid, 300, seed=seed)
    assert np.abs(solid.sdf(cloud.points)).max() < 2 * solid.cell_size().max()


def test_normalize_fits_unit_cube():
    cloud = normalize(sample_surface(execute(bracket_program()), 1000))
    ext = cloud.points.max(0) - cloud.points.min(0)
    assert math.isclose(ext.max(), 2.0)
    np.testing.assert_allclose(cloud.points.mean(0), 0, atol=1e-12)


def test_mesh_and_cloud_io(tmp_path):
    solid = execute(box_program())
    mesh = extract_mesh(solid, 24)
    write_obj(mesh, tmp_path / "a.obj")
    back = read_obj(tmp_path / "a.obj")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-9)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    write_stl(mesh, tmp_path / "a.stl")
    assert (tmp_path / "a.stl").read_text().startswith("solid")
    cloud = sample_surface(solid, 100, mesh=mesh)
    write_xyz(cloud, tmp_path / "a.xyz")
    np.testing.assert_allclose(read_xyz(tmp_path / "a.xyz").points, cloud.points, rtol=1e-8,
                               atol=1e-9)
    write_pc(cloud, tmp_path / "a.gcpc")
    np.testing.assert_array_equal(read_pc(tmp_path / "a.gcpc").points,
                                  cloud.points.astype(np.float32))


def test_coarse_validity_probe_matches_full_grid():
    for seq in synth_corpus(20, seed=3):
        solid = execute(seq)
        assert is_valid(solid) == bool((solid._eval_grid(64) < 0).any())
