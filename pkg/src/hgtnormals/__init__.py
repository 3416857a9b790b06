"""Surface normal estimation from color images and sparse projected point
clouds: a self-contained autodiff engine, procedural scene synthesis, an
attention-based estimator with a pooled-global ablation, a PCA baseline,
and an evaluation harness."""

from .errors import (
    ConfigurationError,
    ContractError,
    DatasetFormatError,
    DegenerateBatchError,
    DegenerateNeighborhoodError,
    DimensionError,
    EmptyFrameError,
)
from .frontend import ModelConfig
from .geometry import (
    CameraIntrinsics,
    Neighborhood,
    PointCloud,
    angle_error,
    mean_angle_error,
    pca_normal,
    project,
    radius_knn,
)
from .model import ModelParams, NormalPrediction
from .tensor import Tape, Tensor
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfigurationError",
    "ContractError",
    "DatasetFormatError",
    "DegenerateBatchError",
    "DegenerateNeighborhoodError",
    "DimensionError",
    "EmptyFrameError",
    "ModelConfig",
    "ModelParams",
    "Neighborhood",
    "NormalPrediction",
    "PointCloud",
    "Tape",
    "Tensor",
    "TrainConfig",
    "angle_error",
    "mean_angle_error",
    "pca_normal",
    "project",
    "radius_knn",
    "train",
]
