"""Rigid-body poses, labeled point clouds, and pose-error metrics.

Conventions used everywhere in this package:

* Quaternions are scalar-first ``(w, x, y, z)``, Hamilton convention.
* ``Pose`` maps points from a source frame into a target frame:
  ``p' = R(q) @ p + t``.  ``compose(a, b)`` applies ``b`` first, then ``a``.
* Semantic labels are small non-negative integers; label 0 is reserved for
  background throughout the pipeline.
* Angles returned by error metrics are degrees; lengths are meters.

All types here are immutable value objects (their arrays are marked
read-only), so they can be shared freely between concurrent tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "Twist",
    "LabeledPointCloud",
    "PoseError",
    "compose",
    "invert",
    "apply",
    "apply_points",
    "quaternion_angle",
    "pose_error",
    "crop_by_label",
    "look_at",
    "quat_mul",
    "quat_conjugate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_axis_angle",
    "pose_to_dict",
    "pose_from_dict",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first, Hamilton)
# ---------------------------------------------------------------------------

def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a * b, both scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's method, stable for
    all sign patterns of the trace)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-300:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    return np.concatenate(([math.cos(half)], math.sin(half) * axis / n))


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion ``q`` (w,x,y,z) plus translation ``t``
    in meters.  Normalized on construction; norm error above 1e-6 is treated
    as a bug in the caller."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(4)
        t = np.array(self.t, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-9:
            raise ValueError("quaternion norm too small to normalize")
        object.__setattr__(self, "q", _readonly(q / n))
        object.__setattr__(self, "t", _readonly(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class Twist:
    """se(3) element: ``rotational`` in radians, ``translational`` in meters."""

    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "rotational",
            _readonly(np.array(self.rotational, dtype=float).reshape(3)))
        object.__setattr__(
            self, "translational",
            _readonly(np.array(self.translational, dtype=float).reshape(3)))

    def exp(self) -> Pose:
        """Exponential map to SE(3).  Uses the closed-form V matrix so that
        ``exp(-xi)`` is exactly the inverse of ``exp(xi)``."""
        w = self.rotational
        v = self.translational
        theta = float(np.linalg.norm(w))
        K = _skew(w)
        if theta < 1e-9:
            # series expansion around theta = 0
            V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
            q = np.concatenate(([1.0], 0.5 * w))
        else:
            a = (1.0 - math.cos(theta)) / (theta * theta)
            b = (theta - math.sin(theta)) / (theta ** 3)
            V = np.eye(3) + a * K + b * (K @ K)
            q = quat_from_axis_angle(w, theta)
        return Pose(q, V @ v)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform that applies ``b`` first, then ``a``."""
    return Pose(quat_mul(a.q, b.q), a.t + quat_to_matrix(a.q) @ b.t)


def invert(p: Pose) -> Pose:
    qc = quat_conjugate(p.q)
    return Pose(qc, -(quat_to_matrix(qc) @ p.t))


@dataclass(frozen=True)
class LabeledPointCloud:
    """Points in meters with per-point integer semantic labels and optional
    unit normals.  Arrays are read-only after construction."""

    points: np.ndarray
    labels: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(pts) != len(labels):
            raise ValueError(
                f"points ({len(pts)}) and labels ({len(labels)}) differ in length")
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "labels", _readonly(labels))
        if self.normals is not None:
            normals = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(normals) != len(pts):
                raise ValueError(
                    f"normals ({len(normals)}) and points ({len(pts)}) differ in length")
            if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must have unit norm within 1e-6")
            object.__setattr__(self, "normals", _readonly(normals))

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def empty(with_normals: bool = False) -> "LabeledPointCloud":
        return LabeledPointCloud(
            np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
            np.zeros((0, 3)) if with_normals else None)


@dataclass(frozen=True)
class PoseError:
    """Translation error norm in meters and rotation angle error in degrees."""

    translation_norm: float
    angle: float

    def __post_init__(self):
        if self.translation_norm < 0:
            raise ValueError("translation_norm must be non-negative")
        if not 0.0 <= self.angle <= 180.0:
            raise ValueError("angle must lie in [0, 180] degrees")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def apply_points(p: Pose, points: np.ndarray) -> np.ndarray:
    """Rotate then translate an (N,3) array of points."""
    return np.asarray(points, dtype=float) @ p.rotation_matrix().T + p.t


def apply(p: Pose, cloud: LabeledPointCloud) -> LabeledPointCloud:
    """Transform a cloud rigidly.  Labels pass through verbatim; normals are
    rotated only."""
    R = p.rotation_matrix()
    normals = None if cloud.normals is None else cloud.normals @ R.T
    return LabeledPointCloud(cloud.points @ R.T + p.t, cloud.labels, normals)


def quaternion_angle(q1, q2) -> float:
    """Rotation angle between two unit quaternions in degrees:
    ``acos(2 * <q1,q2>^2 - 1)``.  Invariant to the sign of either input;
    the acos argument is clamped to [-1, 1] to absorb round-off."""
    d = float(np.dot(np.asarray(q1, dtype=float), np.asarray(q2, dtype=float)))
    arg = min(1.0, max(-1.0, 2.0 * d * d - 1.0))
    return math.degrees(math.acos(arg))


def pose_error(estimate: Pose, truth: Pose) -> PoseError:
    return PoseError(
        translation_norm=float(np.linalg.norm(estimate.t - truth.t)),
        angle=quaternion_angle(estimate.q, truth.q))


def crop_by_label(cloud: LabeledPointCloud, label: int) -> LabeledPointCloud:
    """All points with exactly this label, input order preserved.  Single
    vectorized pass; an empty result is valid."""
    mask = cloud.labels == label
    normals = None if cloud.normals is None else cloud.normals[mask]
    return LabeledPointCloud(cloud.points[mask], cloud.labels[mask], normals)


def look_at(eye, target, up_hint=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose in the world frame (world-from-camera) for a camera at
    ``eye`` looking at ``target``.

    Camera axes follow the vision convention: +z forward, +x right in the
    image, +y down in the image.  ``up_hint`` is the world direction that
    should map to image-up; it must not be parallel to the viewing ray.
    """
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("eye and target coincide")
    z = forward / fn
    up = np.asarray(up_hint, dtype=float)
    y = -up + np.dot(up, z) * z  # image-down, orthogonal to forward
    yn = np.linalg.norm(y)
    if yn < 1e-9:
        raise ValueError("up_hint is parallel to the viewing direction")
    y = y / yn
    x = np.cross(y, z)
    R = np.column_stack([x, y, z])
    return Pose(matrix_to_quat(R), eye)


# ---------------------------------------------------------------------------
# JSON serialization: {"q": [w,x,y,z], "t": [x,y,z]} in meters
# ---------------------------------------------------------------------------

def pose_to_dict(p: Pose) -> dict:
    return {"q": [float(v) for v in p.q], "t": [float(v) for v in p.t]}


def pose_from_dict(d: dict) -> Pose:
    if not isinstance(d, dict) or "q" not in d or "t" not in d:
        raise ValueError('pose JSON must be {"q": [w,x,y,z], "t": [x,y,z]}')
    return Pose(np.asarray(d["q"], dtype=float), np.asarray(d["t"], dtype=float))
