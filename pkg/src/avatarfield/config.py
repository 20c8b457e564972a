"""Run configuration: one nested YAML document, dotted ``--set`` overrides and
full validation before any command does work."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .body import BodyModelError, load_body_model

MAX_FD_LATENT_DIM = 64


class ConfigError(ValueError):
    """Invalid configuration; raised before any side effects."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Seeds(_Strict):
    geometry: int = 1
    texture: int = 2


class FieldSection(_Strict):
    triplane_res: int = 64
    triplane_channels: int = 16
    aggregation: Literal["sum", "concat"] = "sum"
    triplane_scale: float = 0.5
    triplane_init: Literal["smooth", "random", "zero"] = "smooth"
    latent_dim: int = 16
    mapping_layers: int = 8
    mapping_width: int = 64
    decoder_layers: int = 3
    decoder_width: int = 64
    offset_fraction: float = 0.1
    mod_gain: float = 0.5
    offset_gain: float = 0.25

    @field_validator("triplane_res")
    @classmethod
    def _res(cls, v):
        if v < 2:
            raise ValueError(f"triplane resolution must be >= 2, got {v}")
        return v

    @field_validator("triplane_channels", "latent_dim", "mapping_layers", "mapping_width", "decoder_width")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("decoder_layers")
    @classmethod
    def _layers(cls, v):
        if v < 2:
            raise ValueError("decoder needs at least 2 layers (one hidden)")
        return v

    @field_validator("offset_fraction", "triplane_scale", "mod_gain", "offset_gain")
    @classmethod
    def _nonneg(cls, v):
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError("must be finite and >= 0")
        return v


class TetSection(_Strict):
    resolution: int = 64
    margin: float = 0.1

    @field_validator("resolution")
    @classmethod
    def _res(cls, v):
        if v < 2:
            raise ValueError(f"tet grid resolution must be >= 2, got {v}")
        return v

    @field_validator("margin")
    @classmethod
    def _margin(cls, v):
        if not v >= 0:
            raise ValueError("margin must be >= 0")
        return v


class CameraSection(_Strict):
    radius: float = 2.3
    azimuth: float = 0.0
    elevation: float = 0.0
    fov: float = 49.13
    width: int = 256
    height: int = 256

    @model_validator(mode="after")
    def _check(self):
        if not self.radius > 0:
            raise ValueError("camera radius must be > 0")
        if not 0 < self.fov < 180:
            raise ValueError("camera fov must be in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("image resolution must be at least 1x1")
        if not abs(self.elevation) < math.pi / 2:
            raise ValueError("elevation must be strictly between -pi/2 and pi/2")
        return self


class PoseSection(_Strict):
    theta: Optional[list[float]] = None  # 3 * joints + 3 (root translation last); None = rest
    beta: list[float] = Field(default_factory=list)
    file: Optional[str] = None

    @model_validator(mode="after")
    def _finite(self):
        vals = list(self.theta or []) + list(self.beta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("pose entries must be finite")
        return self


class LossSection(_Strict):
    eik: float = 0.001
    ce: float = 0.01

    @model_validator(mode="after")
    def _check(self):
        if self.eik < 0 or self.ce < 0:
            raise ValueError("loss weights must be nonnegative")
        return self


class FitSection(_Strict):
    resolution: int = 32
    bounds: float = 1.0
    init_radius: float = 0.9
    target_radius: float = 0.5
    target_points: int = 2000
    target: Optional[str] = None  # OBJ or whitespace xyz file; overrides the sphere target
    iterations: int = 200
    step_size: float = 600.0
    optimizer: Literal["gd", "momentum"] = "gd"
    normalize_ce: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.resolution < 2:
            raise ValueError(f"tet grid resolution must be >= 2, got {self.resolution}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size >= 0:
            raise ValueError("step size must be >= 0")
        if self.target_points < 1:
            raise ValueError("target_points must be >= 1")
        if not (self.bounds > 0 and self.init_radius > 0 and self.target_radius > 0):
            raise ValueError("fit bounds and radii must be > 0")
        return self


class InvertSection(_Strict):
    target_seeds: list[int] = Field(default_factory=lambda: [5, 6])  # latent seeds of the target render
    init_seed: int = 9
    init_spread: float = 0.3  # start = target latent + spread * N(0, 1); <0 samples an independent latent
    iterations: int = 10
    step_size: float = 0.5
    fd_step: float = 0.2
    backtracks: int = 6
    tet_resolution: int = 24
    # silhouette changes move whole pixels; below ~96 px the image loss is too
    # coarse a staircase for finite differences to follow
    width: int = 96
    height: int = 96

    @model_validator(mode="after")
    def _check(self):
        if len(self.target_seeds) != 2:
            raise ValueError("target_seeds must be [geometry, texture]")
        if self.iterations < 1 or self.backtracks < 0:
            raise ValueError("iterations must be >= 1 and backtracks >= 0")
        if not (self.step_size >= 0 and self.fd_step > 0):
            raise ValueError("step size must be >= 0 and fd_step > 0")
        if self.tet_resolution < 2 or self.width < 1 or self.height < 1:
            raise ValueError("invalid inversion resolution")
        return self


class RetextureSection(_Strict):
    texture_seeds: list[int] = Field(default_factory=lambda: [2, 3])


class GradcheckSection(_Strict):
    points: int = 100
    seed: int = 0
    tolerance: float = 1e-4


class RunConfig(_Strict):
    body: str = "builtin:capsule_biped"
    seeds: Seeds = Field(default_factory=Seeds)
    field: FieldSection = Field(default_factory=FieldSection)
    tet: TetSection = Field(default_factory=TetSection)
    cameras: list[CameraSection] = Field(default_factory=lambda: [CameraSection()])
    turntable: int = 0  # > 0 replaces cameras with this many azimuths of the first camera
    pose: PoseSection = Field(default_factory=PoseSection)
    loss: LossSection = Field(default_factory=LossSection)
    fit: FitSection = Field(default_factory=FitSection)
    invert: InvertSection = Field(default_factory=InvertSection)
    retexture: RetextureSection = Field(default_factory=RetextureSection)
    gradcheck: GradcheckSection = Field(default_factory=GradcheckSection)
    output: str = "out"

    @model_validator(mode="after")
    def _check(self):
        if not self.cameras:
            raise ValueError("at least one camera is required")
        if self.turntable < 0:
            raise ValueError("turntable must be >= 0")
        return self


FULL_SCALE = {
    "field.triplane_res": 256,
    "field.triplane_channels": 32,
    "field.latent_dim": 512,
    "field.mapping_width": 512,
    "field.mapping_layers": 8,
}


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return key.split("."), value


def _set_path(doc: dict, path: list[str], value) -> None:
    node = doc
    for part in path[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
            continue
        if not isinstance(node.get(part, {}), (dict, list)):
            raise ConfigError(f"cannot descend into {'.'.join(path)}")
        node = node.setdefault(part, {})
    last = path[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def build_config(path=None, overrides=(), full_scale: bool = False) -> RunConfig:
    """Merge file, full-scale sizes and overrides, then validate."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p}: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config document must be a mapping")
        doc = loaded or {}
    if full_scale:
        for key, value in FULL_SCALE.items():
            _set_path(doc, key.split("."), value)
    if "cameras" not in doc and any(o.split("=", 1)[0].startswith("cameras.") for o in overrides):
        doc["cameras"] = [CameraSection().model_dump()]
    for item in overrides:
        keys, value = parse_override(item)
        try:
            _set_path(doc, keys, value)
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None
    return cfg


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "invalid config: " + "; ".join(lines)


def check_body(cfg: RunConfig):
    """Load and validate the body model; raises ConfigError."""
    try:
        return load_body_model(cfg.body)
    except (BodyModelError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid body model {cfg.body}: {exc}") from None


def check_pose(cfg: RunConfig, body, pose_doc: dict | None = None):
    """Resolve and validate pose parameters against the body model."""
    from .body import PoseShapeParams

    theta, beta = cfg.pose.theta, cfg.pose.beta
    source = pose_doc
    if source is None and cfg.pose.file:
        source = load_pose_file(cfg.pose.file)
    if source is not None:
        theta, beta = source.get("theta"), source.get("beta", [])
    try:
        if theta is None:
            params = PoseShapeParams.rest(body)
            if beta:
                params = PoseShapeParams.from_vector(params.to_vector(), beta, body.joint_count)
        else:
            params = PoseShapeParams.from_vector(theta, beta, body.joint_count)
        params.check(body)
    except (ValueError, BodyModelError) as exc:
        raise ConfigError(f"invalid pose: {exc}") from None
    return params


def load_pose_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"pose file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"pose file {p}: {exc}") from None
    if not isinstance(doc, dict) or ("theta" not in doc and "beta" not in doc):
        raise ConfigError(f"pose file {p} must be a mapping with theta and/or beta")
    extra = set(doc) - {"theta", "beta"}
    if extra:
        raise ConfigError(f"pose file {p}: unknown keys {sorted(extra)}")
    return doc


def check_invert(cfg: RunConfig) -> None:
    if cfg.field.latent_dim > MAX_FD_LATENT_DIM:
        raise ConfigError(f"latent dimension {cfg.field.latent_dim} exceeds the finite-difference "
                          f"budget of {MAX_FD_LATENT_DIM} for inversion")


def check_output(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    probe = out
    while not probe.exists():
        probe = probe.parent
    import os
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out
