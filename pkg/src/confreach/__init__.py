"""State-dependent conformal perception bounds and high-confidence reach tubes."""

__version__ = "0.1.0"

from .core import BoxSet, Dataset, Interval, State, Trajectory  # noqa: E402
from .conformal import EtaFunction, TimeBoundFunction, conformal_quantile, fit_eta, fit_time_baseline  # noqa: E402
from .partition import LossSpec, OptimizerSpec, Partition, optimize_partition, uniform_partition  # noqa: E402
from .reach import ReachTube, VerifySpec, compute_reach_tube  # noqa: E402
from .system import MountainCarParams, NoiseProfile, default_controller, generate_dataset  # noqa: E402

__all__ = [
    "BoxSet", "Dataset", "EtaFunction", "Interval", "LossSpec", "MountainCarParams", "NoiseProfile",
    "OptimizerSpec", "Partition", "ReachTube", "State", "TimeBoundFunction", "Trajectory", "VerifySpec",
    "compute_reach_tube", "conformal_quantile", "default_controller", "fit_eta", "fit_time_baseline",
    "generate_dataset", "optimize_partition", "uniform_partition",
]
