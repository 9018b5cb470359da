"""Labeled depth-frame fusion into a surfel map.

A trajectory of labeled depth frames is fused by frame-to-model tracking
followed by surfel integration.  Tracking minimizes a joint cost: a
point-to-plane geometric term between back-projected frame points and map
surfels, plus a weighted label-consistency term that compares the frame's
label image against the map's labels splat-rendered from the candidate
camera pose (summed squared integer difference by default; an indicator
mode is available since label ids carry no metric meaning).  The label term
is piecewise constant in the pose, so it is minimized by a coarse-to-fine
discrete search over twist perturbations around the geometric optimum
rather than by gradients.

Pose conventions: ``TrackingResult.pose`` and every ``camera_from_world``
argument map world points into the camera frame.  Trajectory files
(``poses.json``) store the inverse, the camera pose in the world frame.

Surfels merge by proximity (merge radius), equal label, and normal
agreement; merged positions and normals are confidence-weighted averages.
The per-surfel radius is the pixel footprint ``depth / f_mean`` of the
integrating frame.
"""

from __future__ import annotations

import io
import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .calibration import CameraIntrinsics, intrinsics_from_dict, intrinsics_to_dict
from .errors import TrackingLost, ValidationError
from .geometry import (
    LabeledPointCloud,
    Pose,
    Twist,
    invert,
    pose_from_dict,
    pose_to_dict,
)
from .ply_io import write_atomic

_SPLAT_SCALE = 1.5       # surfel disk radius multiplier during rendering
_SPLAT_PATCH_MAX = 4     # cap on splat patch half-extent in pixels
_MIN_TRACK_PAIRS = 30


@dataclass(frozen=True)
class FusionParams:
    """Tracking and integration knobs; defaults match the pipeline config."""

    label_weight: float = 0.1
    label_cost_mode: str = "squared"
    label_depth_gate: float = 0.02
    label_interior_only: bool = True
    edge_depth_jump: float = 0.02
    merge_radius: float = 0.005
    merge_normal_angle_deg: float = 20.0
    active_window: int = 20
    max_depth: float = 5.0
    depth_smooth_sigma_px: float = 0.0
    tracking_max_iterations: int = 30
    tracking_correspondence_distance: float = 0.03
    tracking_normal_gate_deg: float = 45.0
    tracking_huber_scale: float = 0.002
    tracking_translation_tol: float = 1e-9
    tracking_rotation_tol: float = 1e-7
    tracking_lost_rms: float = 0.03
    min_valid_pixels: int = 100
    probe_scales: tuple = ((0.02, 2.0), (0.01, 1.0), (0.005, 0.5))
    probe_rounds: int = 2

    def __post_init__(self):
        if self.label_cost_mode not in ("squared", "indicator"):
            raise ValidationError("label_cost_mode must be 'squared' or 'indicator'")
        positive = ("label_depth_gate", "edge_depth_jump",
                    "merge_radius", "merge_normal_angle_deg", "active_window",
                    "max_depth", "tracking_max_iterations",
                    "tracking_correspondence_distance", "tracking_normal_gate_deg",
                    "tracking_huber_scale", "tracking_translation_tol",
                    "tracking_rotation_tol", "tracking_lost_rms",
                    "min_valid_pixels", "probe_rounds")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"FusionParams.{name} must be strictly positive")
        if self.label_weight < 0 or self.depth_smooth_sigma_px < 0:
            raise ValidationError("label_weight and depth_smooth_sigma_px must be >= 0")


@dataclass(frozen=True)
class LabeledFrame:
    """Depth in meters (0 = invalid) and per-pixel class ids, row-major
    (height, width) arrays matching the intrinsics resolution."""

    depth: np.ndarray
    labels: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: int
    max_range: float = 5.0

    def __post_init__(self):
        depth = np.array(self.depth, dtype=float)
        labels = np.array(self.labels, dtype=np.int64)
        w, h = self.intrinsics.resolution
        if depth.shape != (h, w) or labels.shape != (h, w):
            raise ValidationError(
                f"frame arrays must be (height={h}, width={w}); got depth "
                f"{depth.shape}, labels {labels.shape}")
        if np.any(depth < 0) or np.any(depth > self.max_range):
            raise ValidationError(f"depths must lie in [0, {self.max_range}] m")
        depth.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "labels", labels)

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.depth > 0))


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    radius: float
    label: int
    confidence: float
    last_seen: int


class SurfelMap:
    """Fused scene: flat arrays of surfel attributes.  Single writer:
    integrate_frame mutates, everything else only reads."""

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self.radii = np.zeros(0)
        self.labels = np.zeros(0, dtype=np.int64)
        self.confidences = np.zeros(0)
        self.last_seen = np.zeros(0, dtype=np.int64)
        self.frame_count = 0

    def __len__(self) -> int:
        return len(self.positions)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i].copy(), self.normals[i].copy(),
                      float(self.radii[i]), int(self.labels[i]),
                      float(self.confidences[i]), int(self.last_seen[i]))

    def active_mask(self, window: int) -> np.ndarray:
        return self.last_seen >= self.frame_count - window


@dataclass(frozen=True)
class TrackingResult:
    pose: Pose  # camera-from-world
    final_cost: float
    label_cost: float
    geometric_cost: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class FramePoints:
    """Back-projection of one frame, camera frame, raster order over valid
    pixels.  ``normal_valid`` marks pixels whose central-difference normal
    exists; the others carry a view-ray placeholder and are excluded from
    tracking and integration."""

    points: np.ndarray
    normals: np.ndarray
    normal_valid: np.ndarray
    labels: np.ndarray


# ---------------------------------------------------------------------------
# back-projection
# ---------------------------------------------------------------------------

def smooth_depth(depth: np.ndarray, sigma_px: float,
                 max_deviation: float = 0.01) -> np.ndarray:
    """Validity-normalized Gaussian smoothing of a depth image.  Pixels whose
    smoothed value deviates more than ``max_deviation`` (depth edges) keep
    their raw value; invalid pixels stay invalid."""
    if sigma_px <= 0:
        return depth
    valid = depth > 0
    num = ndimage.gaussian_filter(np.where(valid, depth, 0.0), sigma_px)
    den = ndimage.gaussian_filter(valid.astype(float), sigma_px)
    out = np.where(den > 1e-9, num / np.maximum(den, 1e-9), 0.0)
    out = np.where(np.abs(out - depth) > max_deviation, depth, out)
    return np.where(valid, out, 0.0)


def _point_grid(frame: LabeledFrame, depth: np.ndarray) -> np.ndarray:
    intr = frame.intrinsics
    w, h = intr.resolution
    u = np.arange(w)[None, :]
    v = np.arange(h)[:, None]
    x = (u - intr.c[0]) / intr.f[0] * depth
    y = (v - intr.c[1]) / intr.f[1] * depth
    return np.stack([np.broadcast_to(x, (h, w)),
                     np.broadcast_to(y, (h, w)), depth], axis=-1)


def _depth_edges(depth: np.ndarray, valid: np.ndarray, jump: float) -> np.ndarray:
    """Pixels adjacent to a depth discontinuity.  The threshold scales with
    depth so steep but continuous surfaces (a plane at grazing angle) are
    not flagged, while silhouette steps are."""
    edge = np.zeros(depth.shape, dtype=bool)
    thresh = jump * (1.0 + depth)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        rolled = np.roll(depth, shift, axis=axis)
        rolled_valid = np.roll(valid, shift, axis=axis)
        step = np.abs(depth - rolled) > thresh
        edge |= valid & rolled_valid & step
    return edge


def frame_points(frame: LabeledFrame, smooth_sigma_px: float = 0.0,
                 edge_depth_jump: float = 0.02) -> FramePoints:
    """Back-project every valid pixel; estimate normals from central
    differences of the (optionally smoothed) depth grid.  Normals are unit
    and face the camera; boundary pixels, pixels with invalid neighbors, and
    pixels at depth discontinuities (where differences mix surfaces) are
    marked invalid."""
    depth = smooth_depth(frame.depth, smooth_sigma_px)
    valid = depth > 0
    P = _point_grid(frame, depth)
    h, w = depth.shape

    normals = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    if h >= 3 and w >= 3:
        du = P[1:-1, 2:] - P[1:-1, :-2]
        dv = P[2:, 1:-1] - P[:-2, 1:-1]
        n = np.cross(du, dv)
        norm = np.linalg.norm(n, axis=-1)
        inner_ok = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                    & valid[2:, 1:-1] & valid[:-2, 1:-1] & (norm > 1e-30))
        inner_ok &= ~_depth_edges(depth, valid, edge_depth_jump)[1:-1, 1:-1]
        n = np.where(inner_ok[..., None], n / np.maximum(norm, 1e-300)[..., None], 0.0)
        # orient toward the camera at the origin
        flip = np.sum(n * P[1:-1, 1:-1], axis=-1) > 0
        n[flip] = -n[flip]
        normals[1:-1, 1:-1] = n
        ok[1:-1, 1:-1] = inner_ok

    pts = P[valid]
    nrm = normals[valid]
    nvalid = ok[valid]
    # placeholder for invalid estimates: unit vector back along the view ray
    ray = -pts / np.linalg.norm(pts, axis=1, keepdims=True)
    nrm[~nvalid] = ray[~nvalid]
    return FramePoints(points=pts, normals=nrm, normal_valid=nvalid,
                       labels=frame.labels[valid])


def backproject(frame: LabeledFrame, smooth_sigma_px: float = 0.0) -> LabeledPointCloud:
    """Labeled cloud of all valid pixels in the camera frame.  Normals at
    pixels without a valid central-difference estimate are view-ray
    placeholders; use frame_points for the validity mask."""
    fp = frame_points(frame, smooth_sigma_px)
    return LabeledPointCloud(fp.points, fp.labels, fp.normals)


# ---------------------------------------------------------------------------
# splat rendering
# ---------------------------------------------------------------------------

def render_map(map: SurfelMap, camera_from_world: Pose,
               intrinsics: CameraIntrinsics, params: FusionParams | None = None,
               active_only: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Render (depth, labels) images of the map from a camera pose.

    Each surfel is an oriented disk; every covered pixel takes the depth of
    its own ray's intersection with the surfel plane, so planar surfaces
    render exactly.  Nearest depth wins per pixel; ties keep the earliest
    entry, making renders bit-deterministic.  Pixels nothing covers have
    depth 0 and label 0.
    """
    params = params or FusionParams()
    w, h = intrinsics.resolution
    depth_img = np.zeros((h, w))
    label_img = np.zeros((h, w), dtype=np.int64)
    if len(map) == 0:
        return depth_img, label_img

    sel = map.active_mask(params.active_window) if active_only \
        else np.ones(len(map), dtype=bool)
    if not sel.any():
        return depth_img, label_img

    R = camera_from_world.rotation_matrix()
    pc = map.positions[sel] @ R.T + camera_from_world.t
    nc = map.normals[sel] @ R.T
    labels = map.labels[sel]
    radii = map.radii[sel]

    front = pc[:, 2] > 1e-6
    # backface cull: keep surfels whose normal faces the camera
    facing = np.sum(nc * pc, axis=1) < 0
    keep = front & facing
    if not keep.any():
        return depth_img, label_img
    pc, nc, labels, radii = pc[keep], nc[keep], labels[keep], radii[keep]

    fx, fy = intrinsics.f
    cx, cy = intrinsics.c
    f_mean = 0.5 * (fx + fy)
    u0 = np.rint(fx * pc[:, 0] / pc[:, 2] + cx).astype(np.int64)
    v0 = np.rint(fy * pc[:, 1] / pc[:, 2] + cy).astype(np.int64)
    half = np.clip(np.rint(radii * f_mean / pc[:, 2]).astype(np.int64),
                   1, _SPLAT_PATCH_MAX)

    ndp = np.einsum("ij,ij->i", nc, pc)  # plane offsets n . p

    pix_all, z_all, lab_all, order_all = [], [], [], []
    counter = 0
    for hval in np.unique(half):
        g = half == hval
        m = int(g.sum())
        offs = np.stack(np.meshgrid(np.arange(-hval, hval + 1),
                                    np.arange(-hval, hval + 1),
                                    indexing="ij"), axis=-1).reshape(-1, 2)
        uu = (u0[g][:, None] + offs[None, :, 1]).ravel()
        vv = (v0[g][:, None] + offs[None, :, 0]).ravel()
        inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)

        dirs = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu, dtype=float)],
                        axis=-1)
        nd = np.repeat(nc[g], len(offs), axis=0)
        denom = np.einsum("ij,ij->i", nd, dirs)
        num = np.repeat(ndp[g], len(offs))
        safe = np.abs(denom) > 1e-12
        z = np.where(safe, num / np.where(safe, denom, 1.0), np.inf)
        hit_pt = dirs * z[:, None]
        center = np.repeat(pc[g], len(offs), axis=0)
        within = (np.linalg.norm(hit_pt - center, axis=1)
                  <= _SPLAT_SCALE * np.repeat(radii[g], len(offs)))
        good = inb & safe & (z > 1e-6) & (z <= params.max_depth) & within

        pix_all.append(vv[good] * w + uu[good])
        z_all.append(z[good])
        lab_all.append(np.repeat(labels[g], len(offs))[good])
        order_all.append(counter + np.flatnonzero(good))
        counter += m * len(offs)

    pix = np.concatenate(pix_all)
    if len(pix) == 0:
        return depth_img, label_img
    z = np.concatenate(z_all)
    lab = np.concatenate(lab_all)
    order = np.concatenate(order_all)

    srt = np.lexsort((order, z, pix))
    pix_s, z_s, lab_s = pix[srt], z[srt], lab[srt]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    depth_img.ravel()[pix_s[first]] = z_s[first]
    label_img.ravel()[pix_s[first]] = lab_s[first]
    return depth_img, label_img


def _label_interior(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbors share their label (out-of-image neighbors
    count as matching)."""
    interior = np.ones(labels.shape, dtype=bool)
    interior[1:, :] &= labels[1:, :] == labels[:-1, :]
    interior[:-1, :] &= labels[:-1, :] == labels[1:, :]
    interior[:, 1:] &= labels[:, 1:] == labels[:, :-1]
    interior[:, :-1] &= labels[:, :-1] == labels[:, 1:]
    return interior


def label_cost(frame: LabeledFrame, map: SurfelMap, candidate_pose: Pose,
               params: FusionParams | None = None) -> float:
    """Label-consistency cost of a candidate camera-from-world pose: render
    the active map's labels into the frame's image grid and sum the squared
    label difference (or a 0/1 mismatch indicator) over valid pixels.

    A pixel is valid when both sides carry depth AND the depths agree within
    ``label_depth_gate`` (pixels seeing surface the map does not have yet,
    or splat overhang at silhouettes, would otherwise reward label
    mismatches no camera motion can fix).  With ``label_interior_only`` both
    label images are additionally eroded by one pixel, which removes
    rasterization churn exactly at region boundaries; integer labels carry
    no sub-pixel signal there anyway.
    """
    params = params or FusionParams()
    rendered_depth, rendered_labels = render_map(
        map, candidate_pose, frame.intrinsics, params)
    both = ((frame.depth > 0) & (rendered_depth > 0)
            & (np.abs(rendered_depth - frame.depth) <= params.label_depth_gate))
    if params.label_interior_only:
        both &= _label_interior(frame.labels) & _label_interior(rendered_labels)
    if params.label_cost_mode == "indicator":
        return float(np.count_nonzero(frame.labels[both] != rendered_labels[both]))
    diff = frame.labels[both] - rendered_labels[both]
    return float(np.sum(diff * diff))


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------

def _huber_weights(r: np.ndarray, scale: float) -> np.ndarray:
    """min(1, scale/|r|): outliers from splat overhang and newly revealed
    surface get linear rather than quadratic influence."""
    a = np.abs(r)
    return np.where(a <= scale, 1.0, scale / np.maximum(a, 1e-300))


def _huber_rho(r: np.ndarray, scale: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= scale, r * r, scale * (2.0 * a - scale))


def _geometric_cost(pts_w, normals_w, tree, positions, normals, params):
    """Huber point-to-plane cost, pair count, and plain RMS under distance
    and normal gates."""
    dist, idx = tree.query(pts_w)
    gate = dist <= params.tracking_correspondence_distance
    cos_gate = math.cos(math.radians(params.tracking_normal_gate_deg))
    gate &= np.einsum("ij,ij->i", normals_w, normals[idx]) >= cos_gate
    if not gate.any():
        return 0.0, 0, np.inf
    r = np.einsum("ij,ij->i", normals[idx[gate]],
                  pts_w[gate] - positions[idx[gate]])
    cost = float(np.sum(_huber_rho(r, params.tracking_huber_scale)))
    return cost, int(len(r)), float(np.sqrt(np.mean(r * r)))


def track_camera(map: SurfelMap, frame: LabeledFrame, previous_pose: Pose,
                 params: FusionParams | None = None) -> TrackingResult:
    """Frame-to-model tracking: Gauss-Newton on the point-to-plane term from
    ``previous_pose``, then a coarse-to-fine discrete twist search accepting
    only strict improvements of the joint cost.

    Raises TrackingLost when the final point-to-plane RMS exceeds the loss
    threshold or too few correspondences survive; callers should skip
    integration for this frame.
    """
    params = params or FusionParams()
    if len(map) == 0:
        raise ValidationError("cannot track against an empty map")
    if frame.valid_count() < params.min_valid_pixels:
        raise ValidationError(
            f"frame has {frame.valid_count()} valid pixels; "
            f"need >= {params.min_valid_pixels}")

    fp = frame_points(frame, params.depth_smooth_sigma_px, params.edge_depth_jump)
    pts = fp.points[fp.normal_valid]
    nrm = fp.normals[fp.normal_valid]
    if len(pts) < _MIN_TRACK_PAIRS:
        raise TrackingLost("too few points with valid normals")

    active = map.active_mask(params.active_window)
    positions = map.positions[active]
    normals = map.normals[active]
    if len(positions) == 0:
        raise ValidationError("no active surfels to track against")
    tree = cKDTree(positions)
    cos_gate = math.cos(math.radians(params.tracking_normal_gate_deg))

    W = invert(previous_pose)  # world-from-camera
    iterations = 0
    converged = False
    for _ in range(params.tracking_max_iterations):
        iterations += 1
        Rw = W.rotation_matrix()
        pw = pts @ Rw.T + W.t
        nw = nrm @ Rw.T
        dist, idx = tree.query(pw)
        gate = dist <= params.tracking_correspondence_distance
        gate &= np.einsum("ij,ij->i", nw, normals[idx]) >= cos_gate
        if gate.sum() < _MIN_TRACK_PAIRS:
            break
        ns = normals[idx[gate]]
        r = np.einsum("ij,ij->i", ns, pw[gate] - positions[idx[gate]])
        sw = np.sqrt(_huber_weights(r, params.tracking_huber_scale))
        J = np.hstack([np.cross(pw[gate], ns), ns]) * sw[:, None]
        xi, *_ = np.linalg.lstsq(J, -r * sw, rcond=None)
        W = _left_compose(xi, W)
        if (np.linalg.norm(xi[3:]) < params.tracking_translation_tol
                and np.linalg.norm(xi[:3]) < params.tracking_rotation_tol):
            converged = True
            break

    def joint(Wc: Pose) -> tuple[float, float, float, float]:
        Rw = Wc.rotation_matrix()
        pw = pts @ Rw.T + Wc.t
        nw = nrm @ Rw.T
        g, count, rms = _geometric_cost(pw, nw, tree, positions, normals, params)
        lbl = label_cost(frame, map, invert(Wc), params) if params.label_weight > 0 else 0.0
        return g + params.label_weight * lbl, g, lbl, rms

    best_cost, g0, l0, _ = joint(W)
    # the label term is piecewise constant in the pose: probe twist deltas
    # around the geometric optimum, keeping only strict improvements
    if params.label_weight > 0 and l0 > 0:
        for trans_m, rot_deg in params.probe_scales:
            rot = math.radians(rot_deg)
            for _ in range(params.probe_rounds):
                iterations += 1
                best_probe = None
                for axis in range(6):
                    for sign in (1.0, -1.0):
                        xi = np.zeros(6)
                        xi[axis] = sign * (rot if axis < 3 else trans_m)
                        Wp = _left_compose(xi, W)
                        c, *_ = joint(Wp)
                        if c < best_cost - 1e-12 and (
                                best_probe is None or c < best_probe[0]):
                            best_probe = (c, Wp)
                if best_probe is None:
                    break
                best_cost, W = best_probe[0], best_probe[1]

    final_cost, g, lbl, rms = joint(W)
    _, count, _ = _geometric_cost(
        pts @ W.rotation_matrix().T + W.t,
        nrm @ W.rotation_matrix().T, tree, positions, normals, params)
    if not np.isfinite(rms) or rms > params.tracking_lost_rms or count < _MIN_TRACK_PAIRS:
        raise TrackingLost(
            f"point-to-plane RMS {rms:.4f} m over {count} pairs exceeds "
            f"{params.tracking_lost_rms} m")
    return TrackingResult(
        pose=invert(W),
        final_cost=g + params.label_weight * lbl,
        label_cost=lbl,
        geometric_cost=g,
        iterations=iterations,
        converged=converged)


def _left_compose(xi: np.ndarray, W: Pose) -> Pose:
    from .geometry import compose
    return compose(Twist(xi[:3], xi[3:]).exp(), W)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def integrate_frame(map: SurfelMap, frame: LabeledFrame, pose: Pose,
                    params: FusionParams | None = None) -> SurfelMap:
    """Fuse one frame into the map at a camera-from-world pose.

    Points with a compatible surfel within the merge radius (same label,
    normals within the merge angle) fold into it by confidence-weighted
    averaging; the rest become new surfels, greedily deduplicated in raster
    order.  A final compaction pass restores the invariant that no two
    surfels are mergeable with each other.
    """
    params = params or FusionParams()
    fp = frame_points(frame, params.depth_smooth_sigma_px, params.edge_depth_jump)
    keep = fp.normal_valid
    pts_c = fp.points[keep]
    f_mean = 0.5 * float(frame.intrinsics.f[0] + frame.intrinsics.f[1])
    radii = pts_c[:, 2] / f_mean
    W = invert(pose)
    Rw = W.rotation_matrix()
    pw = pts_c @ Rw.T + W.t
    nw = fp.normals[keep] @ Rw.T
    labels = fp.labels[keep]
    cos_gate = math.cos(math.radians(params.merge_normal_angle_deg))
    t_now = map.frame_count

    # 1) batch-match against the frame-start surfel snapshot
    if len(map):
        tree = cKDTree(map.positions)
        k = min(8, len(map))
        dist, idx = tree.query(pw, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        compat = ((dist <= params.merge_radius)
                  & (map.labels[idx] == labels[:, None])
                  & (np.einsum("mkj,mj->mk", map.normals[idx], nw) >= cos_gate))
        has = compat.any(axis=1)
        first = np.argmax(compat, axis=1)
        target = idx[np.arange(len(pw)), first]

        merged = np.flatnonzero(has)
        if len(merged):
            tgt = target[merged]
            add_pos = np.zeros_like(map.positions)
            add_nrm = np.zeros_like(map.normals)
            add_cnt = np.zeros(len(map))
            np.add.at(add_pos, tgt, pw[merged])
            np.add.at(add_nrm, tgt, nw[merged])
            np.add.at(add_cnt, tgt, 1.0)
            touched = add_cnt > 0
            cw = map.confidences[touched]
            map.positions[touched] = (
                (cw[:, None] * map.positions[touched] + add_pos[touched])
                / (cw + add_cnt[touched])[:, None])
            blend = cw[:, None] * map.normals[touched] + add_nrm[touched]
            norms = np.linalg.norm(blend, axis=1, keepdims=True)
            good = norms[:, 0] > 1e-12
            merged_nrm = map.normals[touched]
            merged_nrm[good] = blend[good] / norms[good]
            map.normals[touched] = merged_nrm
            map.confidences[touched] = cw + add_cnt[touched]
            map.last_seen[touched] = t_now
    else:
        has = np.zeros(len(pw), dtype=bool)

    # 2) greedy insertion of unmatched points (raster order) over a grid
    # hash of current surfels plus already-accepted inserts
    new_idx = np.flatnonzero(~has)
    cell = params.merge_radius
    grid: dict[tuple[int, int, int], list[int]] = {}
    store_pos: list = list(map.positions)
    store_nrm: list = list(map.normals)
    base = len(map)
    for i, p in enumerate(store_pos):
        key = (int(math.floor(p[0] / cell)), int(math.floor(p[1] / cell)),
               int(math.floor(p[2] / cell)))
        grid.setdefault(key, []).append(i)
    store_lab = list(map.labels)

    ins_pos_sum: list = []
    ins_nrm_sum: list = []
    ins_cnt: list = []
    ins_lab: list = []
    ins_rad: list = []
    exist_pos_sum = {}
    exist_nrm_sum = {}
    exist_cnt = {}
    r2 = params.merge_radius ** 2
    for j in new_idx:
        px, py, pz = pw[j]
        nx, ny, nz = nw[j]
        lab = labels[j]
        kx, ky, kz = (int(math.floor(px / cell)), int(math.floor(py / cell)),
                      int(math.floor(pz / cell)))
        best_i = -1
        best_d2 = r2
        for ax in (kx - 1, kx, kx + 1):
            for ay in (ky - 1, ky, ky + 1):
                for az in (kz - 1, kz, kz + 1):
                    for i in grid.get((ax, ay, az), ()):
                        if store_lab[i] != lab:
                            continue
                        q = store_pos[i]
                        d2 = (q[0] - px) ** 2 + (q[1] - py) ** 2 + (q[2] - pz) ** 2
                        if d2 > best_d2:
                            continue
                        n = store_nrm[i]
                        if n[0] * nx + n[1] * ny + n[2] * nz < cos_gate:
                            continue
                        if d2 < best_d2 or (d2 == best_d2 and i < best_i):
                            best_d2, best_i = d2, i
        if best_i >= 0:
            if best_i < base:
                exist_pos_sum.setdefault(best_i, np.zeros(3))
                exist_pos_sum[best_i] += pw[j]
                exist_nrm_sum.setdefault(best_i, np.zeros(3))
                exist_nrm_sum[best_i] += nw[j]
                exist_cnt[best_i] = exist_cnt.get(best_i, 0) + 1
            else:
                # fold into an insert accepted earlier this frame; the grid
                # keeps its arrival position, the batch mean is applied below
                s = best_i - base
                ins_pos_sum[s] = ins_pos_sum[s] + pw[j]
                ins_nrm_sum[s] = ins_nrm_sum[s] + nw[j]
                ins_cnt[s] += 1
        else:
            store_idx = base + len(ins_pos_sum)
            ins_pos_sum.append(pw[j].copy())
            ins_nrm_sum.append(nw[j].copy())
            ins_cnt.append(1)
            ins_lab.append(int(lab))
            ins_rad.append(float(radii[j]))
            store_pos.append(pw[j])
            store_nrm.append(nw[j])
            store_lab.append(int(lab))
            grid.setdefault((kx, ky, kz), []).append(store_idx)

    # fold deferred merges into existing surfels
    if exist_cnt:
        for i, m in sorted(exist_cnt.items()):
            c = map.confidences[i]
            map.positions[i] = (c * map.positions[i] + exist_pos_sum[i]) / (c + m)
            blend = c * map.normals[i] + exist_nrm_sum[i]
            n = np.linalg.norm(blend)
            if n > 1e-12:
                map.normals[i] = blend / n
            map.confidences[i] = c + m
            map.last_seen[i] = t_now

    if ins_pos_sum:
        counts = np.asarray(ins_cnt, dtype=float)
        pos_new = np.asarray(ins_pos_sum) / counts[:, None]
        nrm_new = np.asarray(ins_nrm_sum)
        norms = np.linalg.norm(nrm_new, axis=1, keepdims=True)
        nrm_new = np.where(norms > 1e-12, nrm_new / np.maximum(norms, 1e-300),
                           np.array([0.0, 0.0, -1.0]))
        map.positions = np.vstack([map.positions, pos_new])
        map.normals = np.vstack([map.normals, nrm_new])
        map.radii = np.concatenate([map.radii, np.asarray(ins_rad)])
        map.labels = np.concatenate([map.labels, np.asarray(ins_lab, dtype=np.int64)])
        map.confidences = np.concatenate([map.confidences, counts])
        map.last_seen = np.concatenate([map.last_seen,
                                        np.full(len(counts), t_now, dtype=np.int64)])

    _compact(map, params)
    map.frame_count += 1
    return map


def _compact(map: SurfelMap, params: FusionParams, max_passes: int = 8) -> None:
    """Merge any remaining mutually-mergeable surfel pairs (averaging during
    integration can push surfels together)."""
    cos_gate = math.cos(math.radians(params.merge_normal_angle_deg))
    for _ in range(max_passes):
        if len(map) < 2:
            return
        pairs = cKDTree(map.positions).query_pairs(params.merge_radius,
                                                   output_type="ndarray")
        if len(pairs) == 0:
            return
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        alive = np.ones(len(map), dtype=bool)
        changed = False
        for i, j in pairs:
            if not (alive[i] and alive[j]):
                continue
            if map.labels[i] != map.labels[j]:
                continue
            if float(map.normals[i] @ map.normals[j]) < cos_gate:
                continue
            d = map.positions[i] - map.positions[j]
            if float(d @ d) > params.merge_radius ** 2:
                continue
            ci, cj = map.confidences[i], map.confidences[j]
            map.positions[i] = (ci * map.positions[i] + cj * map.positions[j]) / (ci + cj)
            blend = ci * map.normals[i] + cj * map.normals[j]
            n = np.linalg.norm(blend)
            if n > 1e-12:
                map.normals[i] = blend / n
            map.confidences[i] = ci + cj
            map.radii[i] = min(map.radii[i], map.radii[j])
            map.last_seen[i] = max(map.last_seen[i], map.last_seen[j])
            alive[j] = False
            changed = True
        if not changed:
            return
        map.positions = map.positions[alive]
        map.normals = map.normals[alive]
        map.radii = map.radii[alive]
        map.labels = map.labels[alive]
        map.confidences = map.confidences[alive]
        map.last_seen = map.last_seen[alive]


def extract_cloud(map: SurfelMap, min_confidence: float = 0.0) -> LabeledPointCloud:
    """Positions, normals and labels of every surfel at or above the
    confidence threshold."""
    sel = map.confidences >= min_confidence
    return LabeledPointCloud(map.positions[sel], map.labels[sel], map.normals[sel])


# ---------------------------------------------------------------------------
# frame-sequence directory format
# ---------------------------------------------------------------------------

_DEPTH_RE = re.compile(r"^(\d{4})\.depth\.png$")


def _png_bytes(arr: np.ndarray) -> bytes:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def save_frame_sequence(directory, frames: list[LabeledFrame],
                        poses: list[Pose] | None = None) -> None:
    """Write ``NNNN.depth.png`` (16-bit millimeters), ``NNNN.labels.png``
    (16-bit class ids), ``camera.json``, and optionally ``poses.json``
    holding world-from-camera trajectory poses."""
    os.makedirs(directory, exist_ok=True)
    if not frames:
        raise ValidationError("no frames to save")
    intr = frames[0].intrinsics
    for i, frame in enumerate(frames):
        if frame.intrinsics.resolution != intr.resolution:
            raise ValidationError("all frames must share one resolution")
        depth_mm = np.rint(frame.depth * 1000.0)
        if depth_mm.max() > 0xFFFF:
            raise ValidationError("depth exceeds the 16-bit millimeter range")
        write_atomic(os.path.join(directory, f"{i:04d}.depth.png"),
                     _png_bytes(depth_mm))
        if frame.labels.max() > 0xFFFF or frame.labels.min() < 0:
            raise ValidationError("labels exceed the 16-bit range")
        write_atomic(os.path.join(directory, f"{i:04d}.labels.png"),
                     _png_bytes(frame.labels))
    write_atomic(os.path.join(directory, "camera.json"),
                 json.dumps(intrinsics_to_dict(intr), indent=2,
                            sort_keys=True).encode("ascii"))
    if poses is not None:
        if len(poses) != len(frames):
            raise ValidationError("poses.json needs one pose per frame")
        write_atomic(os.path.join(directory, "poses.json"),
                     json.dumps([pose_to_dict(p) for p in poses], indent=2,
                                sort_keys=True).encode("ascii"))


def load_frame_sequence(directory, max_range: float = 5.0
                        ) -> tuple[list[LabeledFrame], list[Pose] | None]:
    from PIL import Image
    camera_path = os.path.join(directory, "camera.json")
    if not os.path.exists(camera_path):
        raise ValidationError(f"{directory}: missing camera.json")
    with open(camera_path) as fh:
        intr = intrinsics_from_dict(json.load(fh), "camera")
    indices = sorted(
        int(m.group(1)) for name in os.listdir(directory)
        if (m := _DEPTH_RE.match(name)))
    if not indices:
        raise ValidationError(f"{directory}: no NNNN.depth.png frames found")
    frames = []
    for i in indices:
        depth = np.asarray(Image.open(os.path.join(directory, f"{i:04d}.depth.png")),
                           dtype=float) / 1000.0
        labels_path = os.path.join(directory, f"{i:04d}.labels.png")
        if not os.path.exists(labels_path):
            raise ValidationError(f"{directory}: missing {i:04d}.labels.png")
        labels = np.asarray(Image.open(labels_path), dtype=np.int64)
        frames.append(LabeledFrame(depth, labels, intr, timestamp=i,
                                   max_range=max_range))
    poses = None
    poses_path = os.path.join(directory, "poses.json")
    if os.path.exists(poses_path):
        with open(poses_path) as fh:
            poses = [pose_from_dict(d) for d in json.load(fh)]
        if len(poses) != len(frames):
            raise ValidationError("poses.json length does not match frame count")
    return frames, poses
