"""Flow-matching posterior estimation for simulation-based inference."""

from fmpe.errors import ConfigError, FMPEError, NumericError, ShapeError, StorageError
from fmpe.flowengine import ODESolverConfig, Posterior
from fmpe.netcore import ResidualMLPConfig, VectorFieldNetwork
from fmpe.paths import GaussianFlowField, OTPath, VPPath
from fmpe.tasks import get_task
from fmpe.training import TimePrior, TrainConfig, fit_gaussian_flow, generate_dataset, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FMPEError", "NumericError", "ShapeError", "StorageError",
    "ODESolverConfig", "Posterior", "ResidualMLPConfig", "VectorFieldNetwork",
    "GaussianFlowField", "OTPath", "VPPath", "get_task", "TimePrior", "TrainConfig",
    "fit_gaussian_flow", "generate_dataset", "train",
]
