"""Pipeline configuration: every tunable in one validated, JSON-serializable record."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .registration import MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # registration
    confidence_threshold: float = 0.7
    max_corr_dist: float = 5e-3
    odometry_window: int = 1
    loop_radius: float = 0.12
    shift_range: int = 10
    fitness_floor: float = 0.3
    voxel: float = 1.5e-3
    mode: str = "full"
    # counting
    eps: float = 4e-3
    min_pts: int = 2
    sigma: float = 1.5e-3
    r: float = 2.5e-3
    min_confidence: float = 0.0
    depth_gate: float | None = 3e-3
    # metrics
    K: int = 5
    patch_radius: int = 15
    band_fraction: float = 0.5
    splat_px: int = 3
    noise_scales: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    # synthesis and evaluation
    seed: int = 0
    kfold_k: int = 10
    train_fraction: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "noise_scales", tuple(float(s) for s in self.noise_scales))
        positive = ("max_corr_dist", "loop_radius", "eps", "sigma", "r")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        fractions = ("confidence_threshold", "fitness_floor", "min_confidence", "band_fraction", "train_fraction")
        for name in fractions:
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")
        ints = {"odometry_window": 1, "shift_range": 0, "min_pts": 1, "K": 1, "patch_radius": 1,
                "splat_px": 1, "kfold_k": 1, "seed": 0}
        for name, lo in ints.items():
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")
        if not isinstance(self.voxel, (int, float)) or self.voxel < 0:
            raise ConfigError(f"voxel must be >= 0, got {self.voxel!r}")
        if self.depth_gate is not None and not self.depth_gate > 0:
            raise ConfigError(f"depth_gate must be > 0 or null, got {self.depth_gate!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(s < 0 for s in self.noise_scales):
            raise ConfigError("noise_scales must be >= 0")

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["noise_scales"] = list(self.noise_scales)
        return d

    @classmethod
    def from_dict(cls, d) -> PipelineConfig:
        unknown = sorted(set(d) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **overrides) -> PipelineConfig:
        return self.from_dict({**self.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)
