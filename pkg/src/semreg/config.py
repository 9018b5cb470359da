"""Pipeline configuration: validated dataclass blocks with JSON loading,
``block.field=value`` overrides, and self-describing help text.

Every numeric field has a documented legal range; violations are rejected at
load time with the full field path in the message.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .calibration import CameraIntrinsics
from .errors import ConfigError, ValidationError
from .fusion import FusionParams
from .registration import IcpParams


@dataclass(frozen=True)
class NoiseSpec:
    """Synthetic sensor noise: per-pixel Gaussian depth noise (meters),
    random label reassignment rate, and depth dropout rate."""

    depth_sigma: float = 0.0
    label_flip_rate: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.depth_sigma < 0:
            raise ValidationError("depth_sigma must be >= 0")
        for name in ("label_flip_rate", "dropout_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class CameraConfig:
    """Ideal pinhole used for rendering and fusion (no distortion)."""

    f: tuple = (525.0, 525.0)
    c: tuple = (319.5, 239.5)
    resolution: tuple = (640, 480)

    def __post_init__(self):
        if len(self.f) != 2 or self.f[0] <= 0 or self.f[1] <= 0:
            raise ValidationError("f must be two positive focal lengths")
        if len(self.resolution) != 2 or min(self.resolution) < 8:
            raise ValidationError("resolution must be (width, height), each >= 8")
        w, h = self.resolution
        if len(self.c) != 2 or not (0 <= self.c[0] <= w and 0 <= self.c[1] <= h):
            raise ValidationError("c must lie inside the image rectangle")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(f=np.asarray(self.f, dtype=float),
                                c=np.asarray(self.c, dtype=float),
                                d=np.zeros(4),
                                resolution=(int(self.resolution[0]),
                                            int(self.resolution[1])))


@dataclass(frozen=True)
class PruningConfig:
    max_translation: float = 0.5
    max_angle_deg: float = 45.0

    def __post_init__(self):
        if self.max_translation <= 0 or self.max_angle_deg <= 0:
            raise ValidationError("pruning thresholds must be strictly positive")


@dataclass(frozen=True)
class RaycastConfig:
    azimuth_step: float = 30.0
    elevation_step: float = 30.0
    distance: float = 1.0
    resolution: int = 250
    fov_margin: float = 1.05

    def __post_init__(self):
        if not 0 < self.azimuth_step <= 360:
            raise ValidationError("azimuth_step must lie in (0, 360]")
        if not 0 < self.elevation_step <= 180:
            raise ValidationError("elevation_step must lie in (0, 180]")
        if self.distance <= 0 or self.resolution < 8 or self.fov_margin < 1.0:
            raise ValidationError(
                "distance must be > 0, resolution >= 8, fov_margin >= 1")


@dataclass(frozen=True)
class PipelineOptions:
    keyframe_interval: int = 5
    min_confidence: float = 3.0
    use_prior: bool = True

    def __post_init__(self):
        if self.keyframe_interval < 1:
            raise ValidationError("keyframe_interval must be >= 1")
        if self.min_confidence < 0:
            raise ValidationError("min_confidence must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fusion: FusionParams = field(default_factory=FusionParams)
    icp: IcpParams = field(default_factory=IcpParams)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    raycast: RaycastConfig = field(default_factory=RaycastConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)


_BLOCKS = {f.name: f for f in fields(PipelineConfig)}

# documentation strings per field path: (legal range, description)
FIELD_DOCS = {
    "camera.f": ("2 positive floats", "focal lengths in pixels"),
    "camera.c": ("inside the image", "principal point in pixels"),
    "camera.resolution": ("width,height >= 8", "image size in pixels"),
    "noise.depth_sigma": (">= 0", "Gaussian depth noise sigma in meters"),
    "noise.label_flip_rate": ("[0, 1]", "fraction of pixels with a random label"),
    "noise.dropout_rate": ("[0, 1]", "fraction of depth pixels zeroed"),
    "fusion.label_weight": (">= 0", "weight of the label term in tracking"),
    "fusion.label_cost_mode": ("squared|indicator", "label difference form"),
    "fusion.label_depth_gate": ("> 0", "depth agreement gate for label pixels in meters"),
    "fusion.edge_depth_jump": ("> 0", "depth discontinuity threshold in meters"),
    "fusion.merge_radius": ("> 0", "surfel merge radius in meters"),
    "fusion.merge_normal_angle_deg": ("> 0", "surfel merge normal angle in degrees"),
    "fusion.active_window": ("> 0", "frames a surfel stays in the active model"),
    "fusion.max_depth": ("> 0", "maximum depth in meters"),
    "fusion.depth_smooth_sigma_px": (">= 0", "depth pre-smoothing sigma in pixels"),
    "fusion.tracking_max_iterations": ("> 0", "Gauss-Newton iteration cap"),
    "fusion.tracking_correspondence_distance": ("> 0", "tracking pair gate in meters"),
    "fusion.tracking_normal_gate_deg": ("> 0", "tracking normal gate in degrees"),
    "fusion.tracking_huber_scale": ("> 0", "robust loss scale in meters"),
    "fusion.tracking_translation_tol": ("> 0", "translation step tolerance in meters"),
    "fusion.tracking_rotation_tol": ("> 0", "rotation step tolerance in radians"),
    "fusion.tracking_lost_rms": ("> 0", "tracking-lost RMS threshold in meters"),
    "fusion.min_valid_pixels": ("> 0", "minimum valid pixels to track a frame"),
    "fusion.probe_scales": ("list of [m, deg]", "discrete label-search scales"),
    "fusion.probe_rounds": ("> 0", "improvement rounds per probe scale"),
    "icp.max_iterations": ("> 0", "ICP iteration cap"),
    "icp.correspondence_max_distance": ("> 0", "ICP pair rejection gate in meters"),
    "icp.convergence_translation": ("> 0", "ICP translation increment stop in meters"),
    "icp.convergence_rotation": ("> 0", "ICP rotation increment stop in degrees"),
    "icp.fitness_epsilon": ("> 0", "fitness neighbor distance in meters"),
    "pruning.max_translation": ("> 0", "candidate camera distance gate in meters"),
    "pruning.max_angle_deg": ("> 0", "candidate camera angle gate in degrees"),
    "raycast.azimuth_step": ("(0, 360]", "candidate grid azimuth step in degrees"),
    "raycast.elevation_step": ("(0, 180]", "candidate grid elevation step in degrees"),
    "raycast.distance": ("> 0", "candidate camera distance in meters"),
    "raycast.resolution": (">= 8", "candidate render resolution in pixels"),
    "raycast.fov_margin": (">= 1", "bounding-sphere field-of-view margin"),
    "pipeline.keyframe_interval": (">= 1", "frames between registrations"),
    "pipeline.min_confidence": (">= 0", "surfel confidence for extraction"),
    "pipeline.use_prior": ("bool", "prune candidates with the previous estimate"),
}


def default_pipeline_config() -> PipelineConfig:
    return PipelineConfig()


def _coerce(value, current):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ValueError("expected true or false")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ValueError("expected an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool):
            raise ValueError("expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ValueError("expected a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError("expected a list")
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    raise ValueError(f"unsupported field type {type(current).__name__}")


def _apply_to_block(block, updates: dict, block_name: str):
    names = {f.name for f in fields(block)}
    kwargs = {}
    for key, value in updates.items():
        if key not in names:
            raise ConfigError(f"{block_name}.{key}: unknown field")
        try:
            kwargs[key] = _coerce(value, getattr(block, key))
        except ValueError as e:
            raise ConfigError(f"{block_name}.{key}: {e}") from None
    try:
        return replace(block, **kwargs)
    except ValidationError as e:
        raise ConfigError(f"{block_name}: {e}") from None


def load_pipeline_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    """Build a config from defaults, an optional JSON file, and optional
    ``block.field=value`` override strings (overrides win)."""
    config = PipelineConfig()
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be an object")
        for block_name, updates in raw.items():
            if block_name not in _BLOCKS:
                raise ConfigError(f"{block_name}: unknown config block")
            if not isinstance(updates, dict):
                raise ConfigError(f"{block_name}: must be an object")
            config = replace(config, **{
                block_name: _apply_to_block(getattr(config, block_name),
                                            updates, block_name)})
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like block.field=value")
        path_part, _, raw_value = item.partition("=")
        if path_part.count(".") != 1:
            raise ConfigError(f"override {item!r} must look like block.field=value")
        block_name, field_name = path_part.split(".")
        if block_name not in _BLOCKS:
            raise ConfigError(f"{block_name}: unknown config block")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        config = replace(config, **{
            block_name: _apply_to_block(getattr(config, block_name),
                                        {field_name: value}, block_name)})
    return config


def config_to_dict(config: PipelineConfig) -> dict:
    out = {}
    for block_name in _BLOCKS:
        block = getattr(config, block_name)
        out[block_name] = {
            f.name: (list(v) if isinstance(v := getattr(block, f.name), tuple) else v)
            for f in fields(block)}
    return out


def config_help_text() -> str:
    """One line per config field: path, default, legal range, description."""
    config = PipelineConfig()
    lines = ["config fields (set via JSON config file or --set block.field=value):"]
    for block_name in _BLOCKS:
        block = getattr(config, block_name)
        for f in fields(block):
            path = f"{block_name}.{f.name}"
            rng, doc = FIELD_DOCS.get(path, ("", ""))
            default = getattr(block, f.name)
            if isinstance(default, tuple):
                default = list(default)
            lines.append(f"  {path:42s} default={default!r:28} range: {rng:18s} {doc}")
    return "\n".join(lines)
