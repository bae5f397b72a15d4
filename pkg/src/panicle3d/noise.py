"""Random rigid perturbations of camera poses."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform

TRANSLATION_SIGMA_PER_SCALE = 0.4e-3  # m
ROTATION_SIGMA_PER_SCALE = 0.5e-3  # rad


@dataclass(frozen=True)
class PoseNoiseSpec:
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError("noise scale must be >= 0")

    @property
    def translation_sigma(self):
        return self.scale * TRANSLATION_SIGMA_PER_SCALE

    @property
    def rotation_sigma(self):
        return self.scale * ROTATION_SIGMA_PER_SCALE


def perturbation(spec: PoseNoiseSpec, index: int) -> RigidTransform:
    """The ``index``-th random transform of the stream; independent of call order."""
    rng = np.random.default_rng([spec.seed, index])
    t = rng.normal(0.0, 1.0, 3) * spec.translation_sigma
    angles = rng.normal(0.0, 1.0, 3) * spec.rotation_sigma
    R = Rotation.from_euler("xyz", angles).as_matrix()
    return RigidTransform.from_rotation_matrix(R, t)


def inject_pose_noise(poses, spec: PoseNoiseSpec):
    """Right-compose every pose with its own random transform.

    ``poses`` may be a sequence or a mapping (keys keep their order); the
    stream index is the position in that order. Scale 0 returns the input poses.
    """
    if isinstance(poses, dict):
        items = list(poses.items())
        if spec.scale == 0:
            return dict(items)
        return {k: p @ perturbation(spec, i) for i, (k, p) in enumerate(items)}
    poses = list(poses)
    if spec.scale == 0:
        return poses
    return [p @ perturbation(spec, i) for i, p in enumerate(poses)]
