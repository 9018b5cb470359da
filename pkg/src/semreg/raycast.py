"""Viewpoint-specific candidate model clouds generated by mesh ray-casting.

A candidate library covers a sphere of viewpoints around an object mesh:
azimuths half-open in [0, 360), elevations inclusive at both poles.  Each
view casts one ray per pixel of a synthetic pinhole camera and keeps the
nearest triangle intersection, so every emitted point is visible from that
view.  Libraries can be pruned against a pose estimate by camera-center
distance and quaternion angle, which is how registration skips implausible
views.

The ray-triangle test is a vectorized Moller-Trumbore with a 1e-9 epsilon on
the determinant; the nearest positive-t hit wins and exact ties go to the
lowest triangle index, so renders are bit-deterministic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .calibration import CameraIntrinsics, CameraModel
from .errors import EmptyView, NoValidViews, ValidationError
from .geometry import (
    LabeledPointCloud,
    Pose,
    invert,
    look_at,
    pose_from_dict,
    pose_to_dict,
    quaternion_angle,
)
from .meshes import TriangleMesh
from .ply_io import read_ply, write_atomic, write_ply

_DET_EPS = 1e-9
_T_MIN = 1e-12


@dataclass(frozen=True)
class Viewpoint:
    """Spherical viewpoint: azimuth [0,360) deg, elevation [-90,90] deg,
    distance in meters from the mesh centroid."""

    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if not 0.0 <= self.azimuth < 360.0:
            raise ValidationError("azimuth must lie in [0, 360)")
        if not -90.0 <= self.elevation <= 90.0:
            raise ValidationError("elevation must lie in [-90, 90]")
        if self.distance <= 0.0:
            raise ValidationError("distance must be positive")

    def direction(self) -> np.ndarray:
        az = np.radians(self.azimuth)
        el = np.radians(self.elevation)
        return np.array([np.cos(el) * np.cos(az),
                         np.cos(el) * np.sin(az),
                         np.sin(el)])


@dataclass(frozen=True)
class CandidateCrop:
    """A view-dependent model cloud: points in the object frame, all one
    label, plus the camera pose (object-from-camera) it was rendered from."""

    cloud: LabeledPointCloud
    viewpoint: Viewpoint
    camera_pose: Pose
    resolution: int


def intersect_rays(mesh: TriangleMesh, origin, directions) -> tuple[np.ndarray, np.ndarray]:
    """Nearest intersection of rays ``origin + t * directions`` with the mesh.

    Returns (t, triangle_index); misses carry t = inf and index -1.  The ray
    parameter is in units of the direction vectors, which are not normalized
    here on purpose: with camera-frame directions of the form (x, y, 1) the
    parameter equals pinhole depth.
    """
    origin = np.asarray(origin, dtype=float).reshape(3)
    dirs = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)

    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    to_orig = origin - v0

    for i in range(len(mesh.triangles)):
        p = np.cross(dirs, e2[i])
        det = p @ e1[i]
        ok = np.abs(det) > _DET_EPS
        if not ok.any():
            continue
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = (p @ to_orig[i]) * inv
        q = np.cross(to_orig[i], e1[i])
        v = (dirs @ q) * inv
        t = float(e2[i] @ q) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > _T_MIN)
        # strict < keeps the lowest triangle index on exact ties
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        best_tri[closer] = i
    return best_t, best_tri


def triangle_normals(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def pixel_ray_directions(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions (x, y, 1) through every pixel center, in
    raster order.  Distortion coefficients are ignored: rendering cameras
    are ideal pinholes."""
    w, h = intrinsics.resolution
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    return np.column_stack([
        ((u.ravel() - intrinsics.c[0]) / intrinsics.f[0]),
        ((v.ravel() - intrinsics.c[1]) / intrinsics.f[1]),
        np.ones(w * h)])


def raycast_view(mesh: TriangleMesh, camera: CameraModel, label: int) -> LabeledPointCloud:
    """One point per pixel whose ray hits the mesh, at the nearest
    intersection, with the triangle's geometric normal flipped to face the
    camera.  Points are in the mesh (object) frame."""
    world_from_camera = invert(camera.extrinsics)
    origin = world_from_camera.t
    if np.linalg.norm(origin - mesh.centroid()) <= mesh.bounding_radius():
        raise ValidationError("camera must sit outside the mesh bounding sphere")
    dirs = pixel_ray_directions(camera.intrinsics) @ world_from_camera.rotation_matrix().T
    t, tri = intersect_rays(mesh, origin, dirs)
    hit = np.isfinite(t)
    if not hit.any():
        raise EmptyView("no ray hit the mesh")
    pts = origin + t[hit, None] * dirs[hit]
    normals = triangle_normals(mesh)[tri[hit]]
    away = np.sum(normals * (pts - origin), axis=1) > 0.0
    normals[away] = -normals[away]
    return LabeledPointCloud(pts, np.full(hit.sum(), label, dtype=np.int64), normals)


def view_camera(mesh: TriangleMesh, viewpoint: Viewpoint, resolution: int,
                fov_margin: float = 1.05) -> CameraModel:
    """Synthetic pinhole looking at the mesh centroid from a spherical
    viewpoint; focal length fits the bounding sphere with a small margin.
    Views at |elevation| = 90 use world +x as the up-vector tie-break."""
    center = mesh.centroid()
    r = mesh.bounding_radius()
    if viewpoint.distance <= r:
        raise ValidationError(
            f"viewpoint distance {viewpoint.distance} must exceed the mesh "
            f"bounding radius {r:.6g}")
    eye = center + viewpoint.distance * viewpoint.direction()
    up = (1.0, 0.0, 0.0) if abs(viewpoint.elevation) == 90.0 else (0.0, 0.0, 1.0)
    half_angle = np.arcsin(min(1.0, r / viewpoint.distance)) * fov_margin
    half_angle = min(half_angle, np.radians(80.0))
    f = (resolution / 2.0) / np.tan(half_angle)
    intr = CameraIntrinsics(
        f=[f, f], c=[(resolution - 1) / 2.0, (resolution - 1) / 2.0],
        d=[0.0, 0.0, 0.0, 0.0], resolution=(resolution, resolution))
    return CameraModel(intr, invert(look_at(eye, center, up)))


def generate_candidate_library(
        mesh: TriangleMesh, azimuth_step: float, elevation_step: float,
        distance: float, resolution: int, label: int,
        fov_margin: float = 1.05) -> tuple[list[CandidateCrop], int]:
    """Render one candidate per (azimuth, elevation) grid cell.

    Azimuths sample [0, 360) half-open, elevations [-90, 90] inclusive at
    both endpoints (a 30/30 grid gives 12 x 7 = 84 views).  Empty views are
    skipped; the second return value counts them.  Raises NoValidViews when
    every view is empty.
    """
    if azimuth_step <= 0 or elevation_step <= 0:
        raise ValidationError("grid steps must be positive")
    if azimuth_step > 360 or elevation_step > 180:
        raise ValidationError("grid steps must divide their ranges into >= 1 view")
    azimuths = np.arange(0.0, 360.0 - 1e-9, azimuth_step)
    elevations = np.arange(-90.0, 90.0 + 1e-9, elevation_step)
    library: list[CandidateCrop] = []
    skipped = 0
    for el in elevations:
        for az in azimuths:
            vp = Viewpoint(float(az), float(el), float(distance))
            camera = view_camera(mesh, vp, resolution, fov_margin)
            try:
                cloud = raycast_view(mesh, camera, label)
            except EmptyView:
                skipped += 1
                continue
            library.append(CandidateCrop(
                cloud=cloud, viewpoint=vp,
                camera_pose=invert(camera.extrinsics), resolution=resolution))
    if not library:
        raise NoValidViews("every candidate view was empty")
    return library, skipped


def candidate_distances(library: list[CandidateCrop],
                        current_estimate: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Translation (m) and rotation (deg) distance of every candidate's
    render camera from the camera implied by a pose estimate.

    The estimate is the object pose in the frame of the observing camera, so
    the implied camera pose in the object frame is its inverse.
    """
    implied = invert(current_estimate)
    trans = np.array([np.linalg.norm(c.camera_pose.t - implied.t) for c in library])
    ang = np.array([quaternion_angle(c.camera_pose.q, implied.q) for c in library])
    return trans, ang


def prune_mask(library: list[CandidateCrop], current_estimate: Pose,
               max_translation: float, max_angle: float) -> np.ndarray:
    """Boolean keep-mask; guarantees at least the single nearest candidate
    (by translation distance, then angle, then index) survives."""
    if not library:
        raise ValidationError("candidate library is empty")
    trans, ang = candidate_distances(library, current_estimate)
    keep = (trans <= max_translation) & (ang <= max_angle)
    if not keep.any():
        order = np.lexsort((np.arange(len(library)), ang, trans))
        keep[order[0]] = True
    return keep


def prune_candidates(library: list[CandidateCrop], current_estimate: Pose,
                     max_translation: float, max_angle: float) -> list[CandidateCrop]:
    keep = prune_mask(library, current_estimate, max_translation, max_angle)
    return [c for c, k in zip(library, keep) if k]


# ---------------------------------------------------------------------------
# library persistence: one PLY per view plus index.json
# ---------------------------------------------------------------------------

def save_library(directory, library: list[CandidateCrop], skipped: int = 0) -> None:
    os.makedirs(directory, exist_ok=True)
    views = []
    for i, cand in enumerate(library):
        name = f"view_{i:04d}.ply"
        write_ply(os.path.join(directory, name), cand.cloud)
        views.append({
            "file": name,
            "azimuth": cand.viewpoint.azimuth,
            "elevation": cand.viewpoint.elevation,
            "distance": cand.viewpoint.distance,
            "camera_pose": pose_to_dict(cand.camera_pose),
            "resolution": cand.resolution,
            "label": int(cand.cloud.labels[0]) if len(cand.cloud) else 0,
            "point_count": len(cand.cloud),
        })
    index = {"view_count": len(library), "skipped_views": skipped, "views": views}
    write_atomic(os.path.join(directory, "index.json"),
                 json.dumps(index, indent=2, sort_keys=True).encode("ascii"))


def load_library(directory) -> list[CandidateCrop]:
    index_path = os.path.join(directory, "index.json")
    if not os.path.exists(index_path):
        raise ValidationError(f"{directory}: not a candidate library (no index.json)")
    with open(index_path) as fh:
        index = json.load(fh)
    library = []
    for view in index["views"]:
        cloud = read_ply(os.path.join(directory, view["file"]))
        library.append(CandidateCrop(
            cloud=cloud,
            viewpoint=Viewpoint(view["azimuth"], view["elevation"], view["distance"]),
            camera_pose=pose_from_dict(view["camera_pose"]),
            resolution=int(view["resolution"])))
    return library
