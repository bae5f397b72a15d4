"""Seed-landmark registration, seed counting and reference-free quality scores for panicle point clouds."""

from .config import PipelineConfig
from .counting import CountResult, SeedCounter, count_panicle, find_local_maxima
from .dataset import Dataset, Frame, load_dataset
from .evaluation import CountRegressor, kfold_rmse, linear_fit
from .geometry import CameraIntrinsics, PointCloud, RigidTransform
from .metrics import ReconstructionScorer, assess_reconstruction, noise_response_curve
from .registration import MODES, SeedRegistration

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "CameraIntrinsics",
    "CountRegressor",
    "CountResult",
    "Dataset",
    "Frame",
    "PipelineConfig",
    "PointCloud",
    "ReconstructionScorer",
    "RigidTransform",
    "SeedCounter",
    "SeedRegistration",
    "assess_reconstruction",
    "count_panicle",
    "find_local_maxima",
    "kfold_rmse",
    "linear_fit",
    "load_dataset",
    "noise_response_curve",
]
