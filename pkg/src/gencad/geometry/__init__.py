from .profile import (ExtrudeSpec, GeometryError, Primitive, Profile2D, RigidTransform,
                      Segment, SketchPlane, build_loop, build_profile, extrude,
                      plane_transform, profile_sdf, rotation)
from .solid import (CsgNode, SolidModel, VolumeEstimate, combine_bounds, execute,
                    is_valid, volume_estimate)
from .mesh import (PointCloud, TriangleMesh, extract_mesh, normalize, read_obj, read_pc,
                   read_xyz, sample_mesh, sample_surface, write_obj, write_pc, write_stl,
                   write_xyz)
