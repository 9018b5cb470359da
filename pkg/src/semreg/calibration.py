"""Simultaneous intrinsic + extrinsic camera calibration.

The camera is a pinhole with first-order Brown-Conrady distortion: radial
coefficients ``k1, k2`` and tangential ``p1, p2``.  Calibration minimizes the
summed squared pixel reprojection error over a 14-parameter vector (6 for an
extrinsic twist delta, 2 focal lengths, 2 principal-point coordinates, 4
distortion coefficients) with a bounded quasi-Newton solver (L-BFGS-B) using
central-difference gradients.  The extrinsic delta is an unconstrained local
chart around the initial camera-from-world pose, which keeps quaternion
normalization out of the optimizer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import (
    ConfigError,
    DegenerateGeometry,
    EmptyObservations,
    InsufficientObservations,
    NonPositiveDepth,
    ValidationError,
)
from .geometry import Pose, Twist, compose, pose_from_dict, pose_to_dict

MIN_OBSERVATIONS = 6
_MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths ``f`` and principal point ``c`` in pixels, distortion
    ``d = [k1, k2, p1, p2]``, image ``resolution`` as (width, height)."""

    f: np.ndarray
    c: np.ndarray
    d: np.ndarray
    resolution: tuple[int, int]

    def __post_init__(self):
        f = np.array(self.f, dtype=float).reshape(2)
        c = np.array(self.c, dtype=float).reshape(2)
        d = np.array(self.d, dtype=float).reshape(4)
        w, h = self.resolution
        if not (f > 0).all():
            raise ValidationError("focal lengths must be strictly positive")
        if w <= 0 or h <= 0:
            raise ValidationError("resolution must be positive")
        if not (0 <= c[0] <= w and 0 <= c[1] <= h):
            raise ValidationError("principal point must lie inside the image rectangle")
        for arr in (f, c, d):
            arr.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "resolution", (int(w), int(h)))


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics plus the camera-from-world extrinsic pose."""

    intrinsics: CameraIntrinsics
    extrinsics: Pose


@dataclass(frozen=True)
class CalibrationObservation:
    """One target corner: its world position (from forward kinematics or a
    synthetic generator) and the measured pixel location."""

    world_point: np.ndarray
    pixel: np.ndarray

    def __post_init__(self):
        wp = np.array(self.world_point, dtype=float).reshape(3)
        px = np.array(self.pixel, dtype=float).reshape(2)
        wp.setflags(write=False)
        px.setflags(write=False)
        object.__setattr__(self, "world_point", wp)
        object.__setattr__(self, "pixel", px)


@dataclass(frozen=True)
class CalibrationBounds:
    """Box constraints for the 14-vector
    ``[dwx, dwy, dwz, dvx, dvy, dvz, fx, fy, cx, cy, k1, k2, p1, p2]``.
    The twist components bound the delta applied to the initial extrinsics,
    so their intervals must contain zero."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(14)
        hi = np.array(self.upper, dtype=float).reshape(14)
        if np.any(lo >= hi):
            raise ValidationError("every bound interval must have lower < upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @staticmethod
    def around(initial: CameraModel,
               rotation_delta: float = 0.3,
               translation_delta: float = 0.5,
               f_margin: float = 0.25,
               c_margin: float = 0.25,
               d_halfwidth: float = 0.5) -> "CalibrationBounds":
        """Symmetric bounds centered on the initial parameter estimates."""
        intr = initial.intrinsics
        lo = np.concatenate([
            np.full(3, -rotation_delta), np.full(3, -translation_delta),
            intr.f * (1 - f_margin), intr.c * (1 - c_margin),
            intr.d - d_halfwidth])
        hi = np.concatenate([
            np.full(3, rotation_delta), np.full(3, translation_delta),
            intr.f * (1 + f_margin), intr.c * (1 + c_margin),
            intr.d + d_halfwidth])
        return CalibrationBounds(lo, hi)


@dataclass(frozen=True)
class CalibrationResult:
    model: CameraModel
    mean_pixel_error: float
    per_observation_residuals: np.ndarray
    iterations: int
    converged: bool
    cost_history: tuple[float, ...]

    def __post_init__(self):
        res = np.array(self.per_observation_residuals, dtype=float).reshape(-1)
        res.setflags(write=False)
        object.__setattr__(self, "per_observation_residuals", res)
        if len(res) and abs(float(np.mean(res)) - self.mean_pixel_error) > 1e-9:
            raise ValidationError("mean_pixel_error inconsistent with residuals")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _project_camera_frame(pc: np.ndarray, f, c, d) -> np.ndarray:
    z = pc[:, 2]
    if np.any(z <= _MIN_DEPTH):
        raise NonPositiveDepth(
            f"{int(np.sum(z <= _MIN_DEPTH))} point(s) at or behind the camera plane")
    x = pc[:, 0] / z
    y = pc[:, 1] / z
    k1, k2, p1, p2 = d
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.column_stack([f[0] * xd + c[0], f[1] * yd + c[1]])


def project(world_point, model: CameraModel) -> np.ndarray:
    """Project world points to pixels through the distorted pinhole model.

    Accepts a single 3-vector or an (N,3) array; the output shape matches.
    Raises NonPositiveDepth if any point lands at Z <= 1e-9 m in the camera
    frame.
    """
    pts = np.asarray(world_point, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    R = model.extrinsics.rotation_matrix()
    pc = pts @ R.T + model.extrinsics.t
    px = _project_camera_frame(pc, model.intrinsics.f, model.intrinsics.c,
                               model.intrinsics.d)
    return px[0] if single else px


def reprojection_error(model: CameraModel,
                       observations: list[CalibrationObservation]) -> float:
    """Mean pixel distance between measured and projected corners."""
    if not observations:
        raise EmptyObservations("no observations to evaluate")
    world = np.array([o.world_point for o in observations])
    pixels = np.array([o.pixel for o in observations])
    return float(np.mean(np.linalg.norm(pixels - project(world, model), axis=1)))


# ---------------------------------------------------------------------------
# parameter vector plumbing
# ---------------------------------------------------------------------------

def model_param_vector(model: CameraModel) -> np.ndarray:
    """14-vector [rotvec(3), t(3), f(2), c(2), d(4)] of a camera model.
    Used for absolute parameter comparisons; the rotation vector is the
    axis-angle log of the extrinsic quaternion."""
    q = model.extrinsics.q
    w = min(1.0, max(-1.0, float(q[0])))
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(0.0, 1.0 - w * w))
    axis = q[1:] / s if s > 1e-12 else np.array([0.0, 0.0, 0.0])
    return np.concatenate([
        axis * angle, model.extrinsics.t,
        model.intrinsics.f, model.intrinsics.c, model.intrinsics.d])


def _model_from_params(x: np.ndarray, initial: CameraModel) -> CameraModel:
    delta = Twist(x[0:3], x[3:6]).exp()
    return CameraModel(
        intrinsics=CameraIntrinsics(
            f=x[6:8], c=x[8:10], d=x[10:14],
            resolution=initial.intrinsics.resolution),
        extrinsics=compose(delta, initial.extrinsics))


def calibrate(observations: list[CalibrationObservation],
              initial: CameraModel,
              bounds: CalibrationBounds | None = None,
              max_iterations: int = 500,
              ftol: float = 1e-10,
              gtol: float = 1e-8) -> CalibrationResult:
    """Fit extrinsics, focal lengths, principal point and distortion to the
    observations by bounded local descent on the squared pixel error.

    The returned cost_history holds the cost at the initial point and at
    every accepted iterate; it is non-increasing.  ``converged`` is False
    when the iteration cap was reached (the result is still returned).
    """
    if len(observations) < MIN_OBSERVATIONS:
        raise InsufficientObservations(
            f"need at least {MIN_OBSERVATIONS} observations, got {len(observations)}")
    world = np.array([o.world_point for o in observations])
    pixels = np.array([o.pixel for o in observations])

    w, h = initial.intrinsics.resolution
    margin_x, margin_y = 0.1 * w, 0.1 * h
    out = ((pixels[:, 0] < -margin_x) | (pixels[:, 0] > w + margin_x)
           | (pixels[:, 1] < -margin_y) | (pixels[:, 1] > h + margin_y))
    if np.any(out):
        raise ValidationError(
            f"{int(out.sum())} pixel observation(s) fall outside the image "
            "rectangle by more than 10%")

    centered = world - world.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= max(1e-12, 1e-9 * sv[0]):
        raise DegenerateGeometry("world points are collinear")

    if bounds is None:
        bounds = CalibrationBounds.around(initial)
    x0 = np.concatenate([np.zeros(6), initial.intrinsics.f,
                         initial.intrinsics.c, initial.intrinsics.d])
    if np.any(x0 < bounds.lower) or np.any(x0 > bounds.upper):
        raise ValidationError("bounds must contain the initial parameter values")

    R0 = initial.extrinsics.rotation_matrix()
    t0 = initial.extrinsics.t

    # Pixel sensitivity varies by ~3 orders of magnitude across the 14
    # parameters (rotations move pixels by ~f per radian, focal lengths by
    # ~0.4 px per px).  Optimize in a scaled space where each unit step
    # shifts pixels by roughly the same amount.
    f_mean = float(np.mean(initial.intrinsics.f))
    scale = np.concatenate([
        np.full(6, 1.0 / f_mean),
        [3.0, 3.0, 1.0, 1.0],
        [0.02, 0.1, 0.005, 0.005]])

    def cost_physical(x: np.ndarray) -> float:
        delta = Twist(x[0:3], x[3:6]).exp()
        R = delta.rotation_matrix() @ R0
        t = delta.rotation_matrix() @ t0 + delta.t
        pc = world @ R.T + t
        z = pc[:, 2]
        bad = z <= _MIN_DEPTH
        if np.any(bad):
            # smooth penalty steering the solver back in front of the camera
            return 1e12 * (1.0 + float(np.sum(_MIN_DEPTH - z[bad])))
        px = _project_camera_frame(pc, x[6:8], x[8:10], x[10:14])
        diff = px - pixels
        return float(np.sum(diff * diff))

    def residuals_physical(x: np.ndarray) -> np.ndarray | None:
        delta = Twist(x[0:3], x[3:6]).exp()
        R = delta.rotation_matrix() @ R0
        t = delta.rotation_matrix() @ t0 + delta.t
        pc = world @ R.T + t
        if np.any(pc[:, 2] <= _MIN_DEPTH):
            return None
        px = _project_camera_frame(pc, x[6:8], x[8:10], x[10:14])
        return (px - pixels).ravel()

    def cost(u: np.ndarray) -> float:
        return cost_physical(x0 + scale * u)

    def resid(u: np.ndarray) -> np.ndarray | None:
        return residuals_physical(x0 + scale * u)

    lo_u = (bounds.lower - x0) / scale
    hi_u = (bounds.upper - x0) / scale
    history = [cost_physical(x0)]
    res = minimize(
        cost, np.zeros(14), method="L-BFGS-B", jac="3-point",
        bounds=list(zip(lo_u, hi_u)),
        callback=lambda uk: history.append(cost(uk)),
        options={"maxiter": max_iterations, "ftol": ftol, "gtol": gtol,
                 "finite_diff_rel_step": 1e-6})

    # Quasi-Newton progress flattens once finite-difference gradient noise
    # dominates; a damped Gauss-Newton polish restores quadratic convergence
    # near the optimum.  Steps are accepted only when they stay inside the
    # bounds and strictly decrease the cost, so the recorded history remains
    # non-increasing.
    u = res.x.copy()
    f_u = cost(u)
    polish_iters = 0
    converged = bool(res.status == 0)
    for _ in range(40):
        r = resid(u)
        if r is None:
            break
        J = np.empty((len(r), 14))
        ok = True
        for i in range(14):
            h = 1e-6 * max(1.0, abs(u[i]))
            up, um = u.copy(), u.copy()
            up[i] += h
            um[i] -= h
            rp, rm = resid(up), resid(um)
            if rp is None or rm is None:
                ok = False
                break
            J[:, i] = (rp - rm) / (2.0 * h)
        if not ok:
            break
        g = J.T @ r
        H = J.T @ J
        lam = 1e-12 * max(1.0, np.trace(H) / 14.0)
        accepted = False
        for _ in range(8):
            try:
                step = np.linalg.solve(H + lam * np.eye(14), -g)
            except np.linalg.LinAlgError:
                break
            u_new = np.clip(u + step, lo_u, hi_u)
            f_new = cost(u_new)
            if f_new < f_u:
                u, f_u = u_new, f_new
                history.append(f_u)
                polish_iters += 1
                accepted = True
                break
            lam *= 100.0
        if not accepted:
            break
        prev = history[-2]
        if prev - f_u < ftol * max(prev, 1e-300):
            converged = True
            break

    model = _model_from_params(x0 + scale * u, initial)
    residuals = np.linalg.norm(pixels - project(world, model), axis=1)
    return CalibrationResult(
        model=model,
        mean_pixel_error=float(np.mean(residuals)),
        per_observation_residuals=residuals,
        iterations=int(res.nit) + polish_iters,
        converged=converged,
        cost_history=tuple(history))


# ---------------------------------------------------------------------------
# file formats: CSV observations, JSON model/config/result
# ---------------------------------------------------------------------------

def load_observations_csv(path) -> list[CalibrationObservation]:
    """Rows of ``X,Y,Z,u,v`` (meters and pixels).  A non-numeric first row
    is treated as a header."""
    observations = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 5:
                raise ValidationError(f"{path}: row {i + 1}: expected 5 columns, got {len(row)}")
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                if i == 0:
                    continue
                raise ValidationError(f"{path}: row {i + 1}: non-numeric value")
            observations.append(CalibrationObservation(vals[0:3], vals[3:5]))
    return observations


def intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {"f": [float(v) for v in intr.f],
            "c": [float(v) for v in intr.c],
            "d": [float(v) for v in intr.d],
            "resolution": [int(v) for v in intr.resolution]}


def intrinsics_from_dict(d: dict, where: str = "intrinsics") -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            f=np.asarray(d["f"], dtype=float),
            c=np.asarray(d["c"], dtype=float),
            d=np.asarray(d["d"], dtype=float),
            resolution=tuple(d["resolution"]))
    except KeyError as e:
        raise ConfigError(f"{where}.{e.args[0]}: missing field") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def camera_model_to_dict(model: CameraModel) -> dict:
    return {"intrinsics": intrinsics_to_dict(model.intrinsics),
            "extrinsics": pose_to_dict(model.extrinsics)}


def camera_model_from_dict(d: dict, where: str = "camera") -> CameraModel:
    if "intrinsics" not in d or "extrinsics" not in d:
        raise ConfigError(f"{where}: needs 'intrinsics' and 'extrinsics'")
    try:
        extr = pose_from_dict(d["extrinsics"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}.extrinsics: {e}") from None
    return CameraModel(intrinsics_from_dict(d["intrinsics"], f"{where}.intrinsics"),
                       extr)


_BOUND_GROUPS = (("rotation_delta", 0, 3), ("translation_delta", 3, 6),
                 ("f", 6, 8), ("c", 8, 10), ("d", 10, 14))


def load_calibration_config(path) -> tuple[CameraModel, CalibrationBounds]:
    """Config JSON: {"initial": CameraModel, "bounds": {...}}.

    ``bounds.rotation_delta`` / ``bounds.translation_delta`` are symmetric
    half-widths for the extrinsic twist delta; ``f``, ``c``, ``d`` are lists
    of [low, high] pairs.  Omitted groups fall back to defaults around the
    initial model.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if "initial" not in raw:
        raise ConfigError("initial: missing field")
    initial = camera_model_from_dict(raw["initial"], "initial")
    defaults = CalibrationBounds.around(initial)
    lo = defaults.lower.copy()
    hi = defaults.upper.copy()
    spec = raw.get("bounds", {})
    if not isinstance(spec, dict):
        raise ConfigError("bounds: must be an object")
    for key in spec:
        if key not in [g[0] for g in _BOUND_GROUPS]:
            raise ConfigError(f"bounds.{key}: unknown field")
    for name, a, b in _BOUND_GROUPS:
        if name not in spec:
            continue
        val = spec[name]
        if name.endswith("_delta"):
            if not isinstance(val, (int, float)) or val <= 0:
                raise ConfigError(f"bounds.{name}: must be a positive number")
            lo[a:b] = -float(val)
            hi[a:b] = float(val)
        else:
            pairs = np.asarray(val, dtype=float)
            if pairs.shape != (b - a, 2):
                raise ConfigError(
                    f"bounds.{name}: expected {b - a} [low, high] pairs")
            lo[a:b] = pairs[:, 0]
            hi[a:b] = pairs[:, 1]
    try:
        return initial, CalibrationBounds(lo, hi)
    except ValidationError as e:
        raise ConfigError(f"bounds: {e}") from None


def result_to_dict(result: CalibrationResult) -> dict:
    return {
        "model": camera_model_to_dict(result.model),
        "mean_pixel_error": result.mean_pixel_error,
        "max_pixel_error": (float(np.max(result.per_observation_residuals))
                            if len(result.per_observation_residuals) else 0.0),
        "observation_count": int(len(result.per_observation_residuals)),
        "iterations": result.iterations,
        "converged": result.converged,
    }
