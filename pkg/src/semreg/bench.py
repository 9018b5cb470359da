"""Synthetic scenes, ground-truth rendering, and end-to-end evaluation.

Scenes are triangle meshes with unique nonzero labels posed in a world
frame, optionally over a large label-0 background plane, observed along a
camera trajectory.  ``render_frame`` plays the role of both the depth sensor
and the segmenter: per-pixel nearest mesh intersection gives depth and
label, then Gaussian depth noise, dropout, and random label flips are
applied in that order, deterministically per seed.

``run_pipeline`` runs the full loop: fuse frames (or back-project single
frames in the baseline arm), crop per label, register each object against
its candidate library at keyframe intervals, and score estimates against
ground truth with the success rule translation < 50 mm AND angle < 15 deg.
Per-frame tracking or registration failures become failure records rather
than aborting the run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .calibration import CameraIntrinsics
from .config import NoiseSpec, PipelineConfig
from .errors import (
    AllCandidatesFailed,
    EmptyCrop,
    IoFailure,
    NoCorrespondences,
    TrackingLost,
    UnknownLabel,
    ValidationError,
)
from .fusion import (
    FusionParams,
    LabeledFrame,
    SurfelMap,
    backproject,
    extract_cloud,
    integrate_frame,
    track_camera,
)
from .geometry import (
    LabeledPointCloud,
    Pose,
    PoseError,
    apply,
    compose,
    crop_by_label,
    invert,
    look_at,
    pose_error,
    pose_from_dict,
)
from .meshes import TriangleMesh, load_obj, load_stl
from .ply_io import write_atomic
from .raycast import CandidateCrop, generate_candidate_library, intersect_rays, pixel_ray_directions
from .registration import register_object

SUCCESS_MAX_TRANSLATION = 0.05  # meters
SUCCESS_MAX_ANGLE = 15.0        # degrees

_AXES = ("x", "y", "z", "roll", "pitch", "yaw")


@dataclass(frozen=True)
class SceneObject:
    mesh: TriangleMesh
    label: int
    pose: Pose


@dataclass(frozen=True)
class SyntheticScene:
    objects: list
    trajectory: list
    background: TriangleMesh | None = None

    def __post_init__(self):
        labels = [o.label for o in self.objects]
        if any(l <= 0 for l in labels):
            raise ValidationError("object labels must be nonzero (0 is background)")
        if len(set(labels)) != len(labels):
            raise ValidationError("object labels must be unique")
        if not self.trajectory:
            raise ValidationError("trajectory must be non-empty")

    def truth(self) -> dict:
        return {o.label: o.pose for o in self.objects}

    def label_set(self) -> list[int]:
        return sorted({0, *(o.label for o in self.objects)})


@dataclass(frozen=True)
class EvalRecord:
    frame: int
    object_label: int
    error: PoseError
    success: bool

    def __post_init__(self):
        expected = (self.error.translation_norm < SUCCESS_MAX_TRANSLATION
                    and self.error.angle < SUCCESS_MAX_ANGLE)
        if self.success != expected:
            raise ValidationError("success flag contradicts the success rule")

    @staticmethod
    def from_error(frame: int, label: int, error: PoseError) -> "EvalRecord":
        return EvalRecord(frame, label, error,
                          error.translation_norm < SUCCESS_MAX_TRANSLATION
                          and error.angle < SUCCESS_MAX_ANGLE)


@dataclass(frozen=True)
class EvalSummary:
    """Success rate plus error statistics over successful records, and
    per-axis range/std of the estimates over repeat observations (averaged
    over objects).  Rotations are intrinsic Z-Y-X Euler angles."""

    success_rate: float
    record_count: int
    success_count: int
    translation_mean_mm: float
    translation_std_mm: float
    angle_mean_deg: float
    angle_std_deg: float
    per_axis: dict = field(default_factory=dict)
    euler_convention: str = "intrinsic-ZYX (yaw-pitch-roll)"


@dataclass(frozen=True)
class PipelineResult:
    records: list
    summary: EvalSummary
    estimates: list  # (frame, label, Pose object-in-world)
    lost_frames: int


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def euler_zyx_deg(q) -> tuple[float, float, float]:
    """(roll, pitch, yaw) in degrees of R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    from .geometry import quat_to_matrix
    R = quat_to_matrix(q)
    pitch = math.asin(min(1.0, max(-1.0, -R[2, 0])))
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return math.degrees(roll), math.degrees(pitch), math.degrees(yaw)


def orbit_trajectory(center, radius: float, elevation_deg: float, frames: int,
                     azimuth_start_deg: float = 0.0,
                     azimuth_span_deg: float = 360.0) -> list[Pose]:
    """World-from-camera poses on a circle, looking at the center."""
    if frames < 1 or radius <= 0:
        raise ValidationError("orbit needs frames >= 1 and radius > 0")
    center = np.asarray(center, dtype=float)
    el = math.radians(elevation_deg)
    poses = []
    for k in range(frames):
        az = math.radians(azimuth_start_deg + azimuth_span_deg * k / frames)
        eye = center + radius * np.array([math.cos(el) * math.cos(az),
                                          math.cos(el) * math.sin(az),
                                          math.sin(el)])
        up = (1.0, 0.0, 0.0) if abs(elevation_deg) == 90.0 else (0.0, 0.0, 1.0)
        poses.append(look_at(eye, center, up))
    return poses


def _ray_prefilter(origin, dirs, center, radius) -> np.ndarray:
    """Rays whose line passes within ``radius`` of a sphere center."""
    rel = center - origin
    cross = np.cross(dirs, rel)
    return (np.linalg.norm(cross, axis=1)
            <= radius * np.linalg.norm(dirs, axis=1) + 1e-12)


def render_frame(scene: SyntheticScene, camera_pose: Pose,
                 intrinsics: CameraIntrinsics, noise: NoiseSpec | None = None,
                 rng_seed: int = 0, timestamp: int = 0,
                 max_range: float = 5.0) -> LabeledFrame:
    """Render depth and label images from a world-from-camera pose.

    Nearest intersection across all scene meshes wins per pixel; the
    background plane (if any) carries label 0, as do pixels nothing hits
    (their depth is 0, i.e. invalid).  Noise is applied in the order depth
    Gaussian, dropout, label flips, all driven by ``rng_seed``.
    """
    noise = noise or NoiseSpec()
    w, h = intrinsics.resolution
    origin = camera_pose.t
    dirs = pixel_ray_directions(intrinsics) @ camera_pose.rotation_matrix().T

    depth = np.full(w * h, np.inf)
    labels = np.zeros(w * h, dtype=np.int64)

    entities = [(o.mesh, o.label, o.pose) for o in scene.objects]
    if scene.background is not None:
        entities.append((scene.background, 0, Pose.identity()))
    for mesh, label, pose in entities:
        inv = invert(pose)
        center_w = pose.rotation_matrix() @ mesh.centroid() + pose.t
        sel = _ray_prefilter(origin, dirs, center_w, mesh.bounding_radius())
        if not sel.any():
            continue
        o_obj = inv.rotation_matrix() @ origin + inv.t
        d_obj = dirs[sel] @ inv.rotation_matrix().T
        t, _ = intersect_rays(mesh, o_obj, d_obj)
        t = np.where(t <= max_range, t, np.inf)
        target = np.flatnonzero(sel)
        closer = t < depth[target]
        depth[target[closer]] = t[closer]
        labels[target[closer]] = label

    depth = np.where(np.isfinite(depth), depth, 0.0).reshape(h, w)
    labels = labels.reshape(h, w)

    rng = np.random.default_rng(rng_seed)
    valid = depth > 0
    if noise.depth_sigma > 0:
        jitter = rng.normal(0.0, noise.depth_sigma, (h, w))
        depth = np.where(valid, np.clip(depth + jitter, 1e-3, max_range), 0.0)
    if noise.dropout_rate > 0:
        drop = rng.uniform(size=(h, w)) < noise.dropout_rate
        depth = np.where(drop, 0.0, depth)
    if noise.label_flip_rate > 0:
        label_set = np.asarray(scene.label_set(), dtype=np.int64)
        if len(label_set) > 1:
            flip = rng.uniform(size=(h, w)) < noise.label_flip_rate
            draw = rng.integers(0, len(label_set) - 1, (h, w))
            own = np.searchsorted(label_set, labels)
            draw = draw + (draw >= own)  # skip the current label
            labels = np.where(flip, label_set[draw], labels)

    return LabeledFrame(depth, labels, intrinsics, timestamp=timestamp,
                        max_range=max_range)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(estimates: list, truth: list | dict, frame: int = 0) -> list:
    """One EvalRecord per (label, pose) estimate against ground truth."""
    truth_map = dict(truth) if not isinstance(truth, dict) else truth
    records = []
    for label, pose in estimates:
        if label not in truth_map:
            raise UnknownLabel(f"label {label} has no ground-truth pose")
        records.append(EvalRecord.from_error(
            frame, label, pose_error(pose, truth_map[label])))
    return records


def _axis_components(pose: Pose) -> np.ndarray:
    roll, pitch, yaw = euler_zyx_deg(pose.q)
    return np.array([pose.t[0] * 1000.0, pose.t[1] * 1000.0, pose.t[2] * 1000.0,
                     roll, pitch, yaw])


def summarize(records: list, estimates: list | None = None) -> EvalSummary:
    """Success-conditioned error statistics; per-axis repeat-observation
    range and std when the raw estimates are supplied."""
    n = len(records)
    successes = [r for r in records if r.success]
    if successes:
        t = np.array([r.error.translation_norm * 1000.0 for r in successes])
        a = np.array([r.error.angle for r in successes])
        t_mean, t_std = float(t.mean()), float(t.std())
        a_mean, a_std = float(a.mean()), float(a.std())
    else:
        t_mean = t_std = a_mean = a_std = float("nan")

    per_axis: dict = {}
    if estimates:
        by_label: dict = {}
        for _, label, pose in estimates:
            by_label.setdefault(label, []).append(_axis_components(pose))
        ranges = []
        stds = []
        for label in sorted(by_label):
            comps = np.asarray(by_label[label])
            ranges.append(comps.max(axis=0) - comps.min(axis=0))
            stds.append(comps.std(axis=0))
        mean_range = np.mean(ranges, axis=0)
        mean_std = np.mean(stds, axis=0)
        per_axis = {axis: {"range": float(mean_range[i]), "std": float(mean_std[i])}
                    for i, axis in enumerate(_AXES)}

    return EvalSummary(
        success_rate=(len(successes) / n) if n else float("nan"),
        record_count=n,
        success_count=len(successes),
        translation_mean_mm=t_mean,
        translation_std_mm=t_std,
        angle_mean_deg=a_mean,
        angle_std_deg=a_std,
        per_axis=per_axis)


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

def build_libraries(scene: SyntheticScene, config: PipelineConfig) -> dict:
    """One candidate library per object label, from the raycast config."""
    rc = config.raycast
    libraries = {}
    for obj in scene.objects:
        lib, _ = generate_candidate_library(
            obj.mesh, rc.azimuth_step, rc.elevation_step, rc.distance,
            rc.resolution, obj.label, rc.fov_margin)
        libraries[obj.label] = lib
    return libraries


def _frame_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


_FAILURE = PoseError(float("inf"), 180.0)


def run_pipeline(scene: SyntheticScene, noise: NoiseSpec | None,
                 config: PipelineConfig, mode: str = "fused", seed: int = 0,
                 libraries: dict | None = None) -> PipelineResult:
    """Render the trajectory, estimate object poses at keyframes, and score
    them against ground truth.

    ``fused`` mode tracks and integrates every frame (ground-truth pose for
    the first) and registers label crops of the extracted map, transformed
    into the current camera.  ``single-frame`` mode registers per-frame
    back-projections at the same keyframes using the ground-truth camera
    pose, the no-fusion baseline.  Tracking losses and registration failures
    become failure records; the run never aborts.
    """
    if mode not in ("fused", "single-frame"):
        raise ValidationError("mode must be 'fused' or 'single-frame'")
    noise = noise or NoiseSpec()
    intr = config.camera.intrinsics()
    fparams = config.fusion
    truth = scene.truth()
    if libraries is None:
        libraries = build_libraries(scene, config)
    kf = config.pipeline.keyframe_interval
    keyframes = {i for i in range(len(scene.trajectory)) if (i + 1) % kf == 0}

    records: list = []
    estimates: list = []
    priors: dict = {}
    lost_frames = 0

    map = SurfelMap()
    prev_cw = invert(scene.trajectory[0])

    def register_crops(cloud_cam: LabeledPointCloud, world_from_camera: Pose,
                       frame_idx: int) -> None:
        for obj in scene.objects:
            try:
                crop = crop_by_label(cloud_cam, obj.label)
                if len(crop) == 0:
                    raise EmptyCrop(f"label {obj.label} missing from the scene cloud")
                prior_cam = None
                if config.pipeline.use_prior and obj.label in priors:
                    prior_cam = compose(invert(world_from_camera), priors[obj.label])
                res = register_object(
                    libraries[obj.label], crop, prior=prior_cam, params=config.icp,
                    prune_thresholds=(config.pruning.max_translation,
                                      config.pruning.max_angle_deg))
                est_world = compose(world_from_camera, res.pose)
                priors[obj.label] = est_world
                estimates.append((frame_idx, obj.label, est_world))
                records.append(EvalRecord.from_error(
                    frame_idx, obj.label, pose_error(est_world, truth[obj.label])))
            except (EmptyCrop, AllCandidatesFailed, NoCorrespondences):
                records.append(EvalRecord(frame_idx, obj.label, _FAILURE, False))

    for i, cam_pose in enumerate(scene.trajectory):
        frame = render_frame(scene, cam_pose, intr, noise,
                             rng_seed=_frame_seed(seed, i), timestamp=i,
                             max_range=fparams.max_depth)
        if mode == "single-frame":
            if i in keyframes:
                cloud_cam = backproject(frame)
                register_crops(cloud_cam, cam_pose, i)
            continue

        if i == 0:
            pose_cw = invert(cam_pose)  # ground-truth seed for the first frame
        else:
            try:
                pose_cw = track_camera(map, frame, prev_cw, fparams).pose
            except TrackingLost:
                lost_frames += 1
                if i in keyframes:
                    for obj in scene.objects:
                        records.append(EvalRecord(i, obj.label, _FAILURE, False))
                continue
        integrate_frame(map, frame, pose_cw, fparams)
        prev_cw = pose_cw
        if i in keyframes:
            cloud = extract_cloud(map, config.pipeline.min_confidence)
            cloud_cam = apply(pose_cw, cloud)
            register_crops(cloud_cam, invert(pose_cw), i)

    return PipelineResult(records=records,
                          summary=summarize(records, estimates),
                          estimates=estimates,
                          lost_frames=lost_frames)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _histogram_rows(values: np.ndarray, width: float, metric: str) -> list:
    rows = []
    finite = values[np.isfinite(values)]
    if len(finite):
        edges = np.arange(0.0, float(finite.max()) + width, width)
        if len(edges) < 2:
            edges = np.array([0.0, width])
        counts, _ = np.histogram(finite, bins=edges)
        rows = [(metric, float(edges[k]), float(edges[k + 1]), int(counts[k]))
                for k in range(len(counts))]
    overflow = int(np.sum(~np.isfinite(values)))
    if overflow:
        rows.append((metric, float("inf"), float("inf"), overflow))
    return rows


def report(records: list, output_dir, summary: EvalSummary | None = None) -> None:
    """Write records.csv, summary.json, and histogram.csv (1 mm and 0.25 deg
    bins).  Histogram counts per metric sum to the record count; failure
    records land in an inf overflow row."""
    if not records:
        raise ValidationError("no records to report")
    if summary is None:
        summary = summarize(records)
    try:
        os.makedirs(output_dir, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "object_label", "translation_norm_mm",
                         "angle_deg", "success"])
        for r in records:
            writer.writerow([r.frame, r.object_label,
                             repr(r.error.translation_norm * 1000.0),
                             repr(r.error.angle), int(r.success)])
        write_atomic(os.path.join(output_dir, "records.csv"),
                     buf.getvalue().encode("ascii"))

        payload = {
            "success_rate": summary.success_rate,
            "record_count": summary.record_count,
            "success_count": summary.success_count,
            "translation_mean_mm": summary.translation_mean_mm,
            "translation_std_mm": summary.translation_std_mm,
            "angle_mean_deg": summary.angle_mean_deg,
            "angle_std_deg": summary.angle_std_deg,
            "per_axis": summary.per_axis,
            "euler_convention": summary.euler_convention,
        }
        write_atomic(os.path.join(output_dir, "summary.json"),
                     json.dumps(payload, indent=2, sort_keys=True).encode("ascii"))

        t_mm = np.array([r.error.translation_norm * 1000.0 for r in records])
        a_deg = np.array([r.error.angle for r in records])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "bin_low", "bin_high", "count"])
        for row in (_histogram_rows(t_mm, 1.0, "translation_mm")
                    + _histogram_rows(a_deg, 0.25, "angle_deg")):
            writer.writerow(row)
        write_atomic(os.path.join(output_dir, "histogram.csv"),
                     buf.getvalue().encode("ascii"))
    except OSError as e:
        raise IoFailure(f"could not write report files: {e}") from None


# ---------------------------------------------------------------------------
# scene description JSON
# ---------------------------------------------------------------------------

def _load_mesh(path) -> TriangleMesh:
    if str(path).lower().endswith(".stl"):
        return load_stl(path)
    return load_obj(path)


def load_scene(path) -> SyntheticScene:
    """Scene JSON: object mesh files with labels and poses, an optional
    background mesh, and a trajectory (explicit pose list or orbit
    parameters).  Mesh paths resolve relative to the scene file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from None
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    if "objects" not in raw or not raw["objects"]:
        raise ValidationError("scene.objects: at least one object required")
    objects = []
    for i, entry in enumerate(raw["objects"]):
        for key in ("mesh", "label", "pose"):
            if key not in entry:
                raise ValidationError(f"scene.objects[{i}].{key}: missing field")
        objects.append(SceneObject(
            mesh=_load_mesh(resolve(entry["mesh"])),
            label=int(entry["label"]),
            pose=pose_from_dict(entry["pose"])))

    background = None
    if "background" in raw and raw["background"] is not None:
        if "mesh" not in raw["background"]:
            raise ValidationError("scene.background.mesh: missing field")
        background = _load_mesh(resolve(raw["background"]["mesh"]))

    traj_spec = raw.get("trajectory")
    if not isinstance(traj_spec, dict):
        raise ValidationError("scene.trajectory: missing or not an object")
    if "poses" in traj_spec:
        trajectory = [pose_from_dict(d) for d in traj_spec["poses"]]
    elif "orbit" in traj_spec:
        orbit = traj_spec["orbit"]
        for key in ("center", "radius", "elevation_deg", "frames"):
            if key not in orbit:
                raise ValidationError(f"scene.trajectory.orbit.{key}: missing field")
        trajectory = orbit_trajectory(
            orbit["center"], float(orbit["radius"]), float(orbit["elevation_deg"]),
            int(orbit["frames"]),
            azimuth_start_deg=float(orbit.get("azimuth_start_deg", 0.0)),
            azimuth_span_deg=float(orbit.get("azimuth_span_deg", 360.0)))
    else:
        raise ValidationError("scene.trajectory: needs 'poses' or 'orbit'")
    return SyntheticScene(objects=objects, trajectory=trajectory,
                          background=background)
