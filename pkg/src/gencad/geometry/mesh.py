"""Surface extraction, surface sampling and point-cloud utilities."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .profile import GeometryError
from .solid import DEFAULT_RESOLUTION


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @property
    def n_triangles(self):
        return int(len(self.faces))

    def triangle_areas(self):
        if not len(self.faces):
            return np.zeros(0)
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self):
        return float(self.triangle_areas().sum())


def extract_mesh(solid, resolution=DEFAULT_RESOLUTION):
    """Marching-cubes triangulation of the zero level set over the solid's bounds."""
    values = solid.grid(resolution)
    if not (values < 0).any() or not (values > 0).any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = tuple(float(c) for c in solid.cell_size(resolution))
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=spacing)
    verts = verts + np.asarray(solid.bounds[0])
    return TriangleMesh(verts.astype(np.float64), faces.astype(np.int64))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)


def sample_surface(solid, n_points=2000, seed=0, resolution=DEFAULT_RESOLUTION, mesh=None):
    """Area-weighted uniform samples on the extracted surface."""
    mesh = extract_mesh(solid, resolution) if mesh is None else mesh
    if mesh.n_triangles == 0:
        raise GeometryError("cannot sample empty solid")
    return sample_mesh(mesh, n_points, seed, {"seed": seed, "resolution": resolution})


def sample_mesh(mesh, n_points, seed=0, provenance=None):
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n_points, p=areas / areas.sum())
    r1, r2 = rng.random(n_points), rng.random(n_points)
    s1 = np.sqrt(r1)
    w = np.stack([1 - s1, s1 * (1 - r2), s1 * r2], axis=1)
    corners = mesh.vertices[mesh.faces[tri]]  # (n, 3, 3)
    pts = np.einsum("nk,nkd->nd", w, corners)
    return PointCloud(pts, dict(provenance or {"seed": seed}))


def normalize(cloud):
    """Recenter on the centroid and scale the longest axis-aligned extent to 2."""
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    pts = pts - pts.mean(0)
    extent = float((pts.max(0) - pts.min(0)).max())
    if extent > 0:
        pts = pts * (2.0 / extent)
    prov = dict(cloud.provenance) if isinstance(cloud, PointCloud) else {}
    prov["normalized"] = True
    return PointCloud(pts, prov)


# ---------------------------------------------------------------------- I/O

def write_stl(mesh, path, name="gencad"):
    with open(path, "w") as fh:
        fh.write(f"solid {name}\n")
        for f in mesh.faces:
            a, b, c = mesh.vertices[f]
            n = np.cross(b - a, c - a)
            norm = np.linalg.norm(n)
            n = n / norm if norm > 0 else n
            fh.write(f"  facet normal {n[0]:.6e} {n[1]:.6e} {n[2]:.6e}\n    outer loop\n")
            for v in (a, b, c):
                fh.write(f"      vertex {v[0]:.6e} {v[1]:.6e} {v[2]:.6e}\n")
            fh.write("    endloop\n  endfacet\n")
        fh.write(f"endsolid {name}\n")


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_xyz(cloud, path):
    np.savetxt(path, np.asarray(cloud.points), fmt="%.9g")


def read_xyz(path):
    return PointCloud(np.loadtxt(path, ndmin=2).reshape(-1, 3))


_PC_MAGIC = b"GCPC1"


def write_pc(cloud, path):
    """GCPC1: magic, u32 point count, then little-endian f32 xyz triples."""
    pts = np.asarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_PC_MAGIC + struct.pack("<I", len(pts)))
        fh.write(pts.tobytes(order="C"))


def read_pc(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _PC_MAGIC or len(blob) < 9:
        raise ValueError(f"{path}: not a GCPC1 file")
    (n,) = struct.unpack("<I", blob[5:9])
    payload = blob[9:]
    if len(payload) != 12 * n:
        raise ValueError(f"{path}: truncated point payload")
    return PointCloud(np.frombuffer(payload, dtype="<f4").reshape(n, 3).astype(np.float64))
