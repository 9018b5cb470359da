import numpy as np
import pytest

from semreg.calibration import CameraIntrinsics
from semreg.bench import SceneObject, SyntheticScene, orbit_trajectory
from semreg.geometry import Pose, quat_from_axis_angle
from semreg.meshes import make_l_block, make_plane, make_step_block, make_t_block


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running property suites")


def small_intrinsics(w=96, h=72, f=80.0) -> CameraIntrinsics:
    return CameraIntrinsics(f=[f, f], c=[(w - 1) / 2, (h - 1) / 2],
                            d=[0, 0, 0, 0], resolution=(w, h))


def desk_scene(frames=40, radius=1.0, elevation=35.0, plane_size=3.0,
               n_objects=3, azimuth_span=60.0) -> SyntheticScene:
    """Three asymmetric blocks on a large background plane, observed along a
    local camera arc (sequential tracking needs small inter-frame motion).
    The standard fixture scene for fusion and benchmark tests."""
    meshes = [make_l_block(), make_t_block(), make_step_block()]
    poses = [
        Pose(quat_from_axis_angle([0, 0, 1], 0.4), [0.10, 0.06, 0.0]),
        Pose(quat_from_axis_angle([0, 0, 1], -0.9), [-0.13, -0.02, 0.0]),
        Pose(quat_from_axis_angle([0, 0, 1], 1.8), [0.00, -0.16, 0.0]),
    ]
    objects = [SceneObject(meshes[i], i + 1, poses[i]) for i in range(n_objects)]
    return SyntheticScene(
        objects=objects,
        background=make_plane(plane_size, z=0.0, cells=2),
        trajectory=orbit_trajectory([0.0, 0.0, 0.05], radius, elevation, frames,
                                    azimuth_start_deg=20.0,
                                    azimuth_span_deg=azimuth_span))


# --- point-to-mesh distance oracle (brute force over triangles) ---------------

def point_triangle_distances(points, a, b, c):
    """Exact distance from each point to one triangle (projection onto the
    plane, clamped to edges and vertices)."""
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = ap @ ab
    d2 = ap @ ac
    bp = points - b
    d3 = bp @ ab
    d4 = bp @ ac
    cp = points - c
    d5 = cp @ ab
    d6 = cp @ ac

    result = np.full(len(points), np.inf)
    done = np.zeros(len(points), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    result[m] = np.linalg.norm(ap[m], axis=1)
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    result[m] = np.linalg.norm(bp[m], axis=1)
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    result[m] = np.linalg.norm(cp[m], axis=1)
    done |= m

    vc = d1 * d4 - d3 * d2
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    if m.any():
        t = d1[m] / (d1[m] - d3[m])
        result[m] = np.linalg.norm(ap[m] - t[:, None] * ab, axis=1)
        done |= m
    vb = d5 * d2 - d1 * d6
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    if m.any():
        t = d2[m] / (d2[m] - d6[m])
        result[m] = np.linalg.norm(ap[m] - t[:, None] * ac, axis=1)
        done |= m
    va = d3 * d6 - d5 * d4
    m = ~done & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    if m.any():
        t = (d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m]))
        result[m] = np.linalg.norm(bp[m] - t[:, None] * (c - b), axis=1)
        done |= m

    m = ~done
    if m.any():
        denom = va[m] + vb[m] + vc[m]
        v = vb[m] / denom
        w = vc[m] / denom
        closest = a + v[:, None] * ab + w[:, None] * ac
        result[m] = np.linalg.norm(points[m] - closest, axis=1)
    return result


def point_mesh_distance(points, mesh):
    """Distance of each point to the nearest triangle of the mesh."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    best = np.full(len(points), np.inf)
    for tri in mesh.triangles:
        a, b, c = mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]
        best = np.minimum(best, point_triangle_distances(points, a, b, c))
    return best
