"""Model-to-scene registration: ICP over ray-cast candidate crops.

Point-to-point ICP with a closed-form SVD rigid update.  Correspondences run
model -> scene (each transformed model point takes its nearest scene
neighbor), so scene clutter cannot create pairs.  The recorded per-iteration
cost is the distance-truncated SSE ``sum(min(d_i, d_max)^2)`` over all model
points, which is provably non-increasing under alternating matching and
closed-form updates even when the accepted pair set changes.

``register_object`` scores every (possibly pruned) candidate crop by the
model-to-scene fitness, the fraction of model points with a scene neighbor
within ``fitness_epsilon`` after alignment.  Each candidate is registered in
its own render-camera frame, where a translation-only centroid seed is
enough; the render viewpoint supplies the rotational diversity, and the
winning view's pose is composed back into an object-in-scene pose.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllCandidatesFailed,
    EmptyCrop,
    NoCorrespondences,
    ValidationError,
)
from .geometry import (
    LabeledPointCloud,
    Pose,
    compose,
    invert,
    matrix_to_quat,
    quaternion_angle,
)
from .raycast import CandidateCrop, prune_mask


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    correspondence_max_distance: float = 0.05
    convergence_translation: float = 1e-6
    convergence_rotation: float = 1e-4  # degrees
    fitness_epsilon: float = 0.01

    def __post_init__(self):
        for name in ("max_iterations", "correspondence_max_distance",
                     "convergence_translation", "convergence_rotation",
                     "fitness_epsilon"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"IcpParams.{name} must be strictly positive")


@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose
    fitness: float
    rmse: float
    iterations: int
    converged: bool
    candidate_index: int
    cost_history: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValidationError("fitness must lie in [0, 1]")
        if self.rmse < 0.0:
            raise ValidationError("rmse must be non-negative")


def centroid_seed(scene_crop: LabeledPointCloud) -> Pose:
    """Identity rotation at the crop centroid."""
    if len(scene_crop) == 0:
        raise EmptyCrop("cannot seed from an empty crop")
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), scene_crop.points.mean(axis=0))


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping src onto dst (SVD, reflection
    guarded)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(matrix_to_quat(R), cd - R @ cs)


def icp(model: LabeledPointCloud, scene: LabeledPointCloud, seed: Pose,
        params: IcpParams | None = None, *, scene_tree: cKDTree | None = None,
        candidate_index: int = -1) -> RegistrationResult:
    """Iterative closest point from a seed pose.

    Raises NoCorrespondences when no pair survives distance rejection at the
    seed.  ``cost_history`` holds the truncated SSE at each iteration before
    its update and is non-increasing.
    """
    params = params or IcpParams()
    if len(model) == 0 or len(scene) == 0:
        raise ValidationError("model and scene must be non-empty")
    tree = scene_tree if scene_tree is not None else cKDTree(scene.points)
    d_max = params.correspondence_max_distance

    pose = seed
    history: list[float] = []
    converged = False
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        iterations = it
        moved = model.points @ pose.rotation_matrix().T + pose.t
        dist, idx = tree.query(moved)
        accept = dist <= d_max
        if not accept.any():
            if it == 1:
                raise NoCorrespondences(
                    "no model point found a scene neighbor within "
                    f"{d_max} m at the seed pose")
            break
        history.append(float(np.sum(np.minimum(dist, d_max) ** 2)))
        new_pose = _kabsch(model.points[accept], scene.points[idx[accept]])
        dt = float(np.linalg.norm(new_pose.t - pose.t))
        da = quaternion_angle(new_pose.q, pose.q)
        pose = new_pose
        if dt < params.convergence_translation and da < params.convergence_rotation:
            converged = True
            break

    moved = model.points @ pose.rotation_matrix().T + pose.t
    dist, _ = tree.query(moved)
    accept = dist <= d_max
    rmse = float(np.sqrt(np.mean(dist[accept] ** 2))) if accept.any() else float("inf")
    return RegistrationResult(
        pose=pose,
        fitness=float(np.mean(dist <= params.fitness_epsilon)),
        rmse=rmse,
        iterations=iterations,
        converged=converged,
        candidate_index=candidate_index,
        cost_history=tuple(history))


def fitness(model: LabeledPointCloud, scene: LabeledPointCloud, pose: Pose,
            epsilon: float) -> float:
    """Fraction of model points whose nearest scene neighbor after the
    transform lies within epsilon."""
    if len(model) == 0 or len(scene) == 0:
        raise ValidationError("model and scene must be non-empty")
    moved = model.points @ pose.rotation_matrix().T + pose.t
    dist, _ = cKDTree(scene.points).query(moved)
    return float(np.mean(dist <= epsilon))


def _better(a: RegistrationResult, b: RegistrationResult) -> bool:
    """Total order for winner selection: higher fitness, then lower rmse,
    then lower candidate index."""
    return (-a.fitness, a.rmse, a.candidate_index) < (-b.fitness, b.rmse, b.candidate_index)


def register_object(library: list[CandidateCrop], scene_crop: LabeledPointCloud,
                    prior: Pose | None = None, params: IcpParams | None = None,
                    prune_thresholds: tuple[float, float] = (0.5, 45.0),
                    workers: int = 1) -> RegistrationResult:
    """Register an object against a scene crop by trying candidate views.

    The scene crop must be expressed in the frame of the observing camera;
    ``prior``, when given, is the object pose in that same frame and is used
    both to prune the library and to seed each surviving candidate.  Without
    a prior every candidate runs, seeded by the scene centroid.  The result
    pose is object-in-scene; ``candidate_index`` refers to the full library.
    """
    params = params or IcpParams()
    if not library:
        raise ValidationError("candidate library is empty")
    if len(scene_crop) == 0:
        raise EmptyCrop("scene crop is empty")

    if prior is None:
        indices = list(range(len(library)))
        scene_centroid = scene_crop.points.mean(axis=0)
    else:
        keep = prune_mask(library, prior, *prune_thresholds)
        indices = [i for i in range(len(library)) if keep[i]]

    scene_tree = cKDTree(scene_crop.points)

    def run_one(i: int) -> RegistrationResult | None:
        cand = library[i]
        cam_from_obj = invert(cand.camera_pose)
        model = cand.cloud.points @ cam_from_obj.rotation_matrix().T + cam_from_obj.t
        model_cloud = LabeledPointCloud(model, cand.cloud.labels)
        if prior is None:
            seed = Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                        scene_centroid - model.mean(axis=0))
        else:
            seed = compose(prior, cand.camera_pose)
        try:
            res = icp(model_cloud, scene_crop, seed, params,
                      scene_tree=scene_tree, candidate_index=i)
        except NoCorrespondences:
            return None
        return replace(res, pose=compose(res.pose, cam_from_obj))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, indices))
    else:
        results = [run_one(i) for i in indices]

    best: RegistrationResult | None = None
    for res in results:
        if res is not None and (best is None or _better(res, best)):
            best = res
    if best is None:
        raise AllCandidatesFailed(
            f"all {len(indices)} candidate(s) raised NoCorrespondences")
    return best
