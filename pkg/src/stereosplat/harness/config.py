"""Configuration dataclasses and strict JSON round-tripping.

A config file holds two sections, ``{"scene": {...}, "train": {...}}``, each
mapping field names of the matching dataclass. Unknown keys are rejected so
typos fail fast instead of silently training with defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Layered textured-plane scene with a straight camera track.

    Cameras sit on a line along x spanning ``baseline`` scene units, all
    looking down +z. Planes are value-noise textured, centered near the
    optical axis at the given depths; every plane except the last is a
    finite rectangle so farther planes show around it, and the last plane
    is infinite so every pixel has a hit. ``scale`` multiplies poses and
    the near/far range handed to the model (the images themselves are
    rendered once, at scale 1 — the scale is a pose ambiguity, not a
    different world).
    """

    plane_depths: tuple[float, ...] = (3.0, 6.0, 10.0)
    plane_tilts: tuple[float, ...] = (0.0, 8.0, 0.0)  # degrees about the y axis
    texture_seed: int = 0
    baseline: float = 1.0
    image_height: int = 64
    image_width: int = 64
    near: float = 1.0
    far: float = 12.0
    scale: float = 1.0
    track_count: int = 9
    texture_mode: str = "noise"  # "noise" | "blocks" (distinct flat patches)

    def __post_init__(self) -> None:
        if not self.plane_depths:
            raise ConfigError("need at least one plane")
        if len(self.plane_tilts) != len(self.plane_depths):
            raise ConfigError("plane_tilts must match plane_depths in length")
        if not self.near < min(self.plane_depths) <= max(self.plane_depths) < self.far:
            raise ConfigError(
                f"plane depths {self.plane_depths} must lie strictly inside "
                f"({self.near}, {self.far})"
            )
        if self.baseline <= 0 or self.scale <= 0:
            raise ConfigError("baseline and scale must be positive")
        if self.track_count < 3 or self.track_count % 2 == 0:
            raise ConfigError("track_count must be odd and >= 3")
        if self.image_height % 4 or self.image_width % 4:
            raise ConfigError("image size must be divisible by 4")
        if self.texture_mode not in ("noise", "blocks"):
            raise ConfigError(f"unknown texture_mode {self.texture_mode!r}")
        if tuple(sorted(self.plane_depths)) != tuple(self.plane_depths):
            raise ConfigError("plane_depths must be sorted nearest first")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 400
    learning_rate: float = 3e-3
    mse_weight: float = 1.0
    tv_weight: float = 0.0
    head_mode: str = "probabilistic"  # "probabilistic" | "regression"
    no_epipolar: bool = False
    no_depth_encoding: bool = False
    z_count: int = 32
    rounds: int = 2
    samples: int = 32
    channels: int = 64
    hidden: int = 128
    sh_degree: int = 1
    literal_offset: bool = False
    # Reference-pair baseline fraction ramps linearly from start to end over
    # the first half of training, then stays at end.
    curriculum_start: float = 0.25
    curriculum_end: float = 1.0
    checkpoint_every: int = 200
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.head_mode not in ("probabilistic", "regression"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if not 0.0 < self.curriculum_start <= self.curriculum_end <= 1.0:
            raise ConfigError("need 0 < curriculum_start <= curriculum_end <= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.mse_weight < 0 or self.tv_weight < 0:
            raise ConfigError("loss weights must be nonnegative")


def _from_dict(cls, data: dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    coerced = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in data.items()
    }
    return cls(**coerced)


def load_config(path: str | Path) -> tuple[SceneSpec, TrainConfig]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or set(raw) - {"scene", "train"}:
        raise ConfigError(f"{path}: top level must contain only 'scene' and 'train'")
    spec = _from_dict(SceneSpec, raw.get("scene", {}), "scene")
    train = _from_dict(TrainConfig, raw.get("train", {}), "train")
    return spec, train


def save_config(path: str | Path, spec: SceneSpec, train: TrainConfig) -> None:
    payload = {"scene": dataclasses.asdict(spec), "train": dataclasses.asdict(train)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
