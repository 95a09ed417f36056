from .config import (
    BUFFER_C,
    BUFFER_DELTA,
    DomainKind,
    DomainSpec,
    InsufficientBuffer,
    InvalidDomain,
    InvalidInput,
    SimConfig,
    required_buffer,
)
from .motion import MotionKind, Trajectory, WindowedNodes, brownian_path
from .parallel import map_trials
from .points import (
    NodeEnsemble,
    StationarityReport,
    sample_poisson_points,
    stationarity_check,
    step_brownian,
)
from .stats import TailCurve, chernoff_poisson_threshold, tail_from_steps

__all__ = [
    "BUFFER_C",
    "BUFFER_DELTA",
    "DomainKind",
    "DomainSpec",
    "InsufficientBuffer",
    "InvalidDomain",
    "InvalidInput",
    "MotionKind",
    "NodeEnsemble",
    "SimConfig",
    "StationarityReport",
    "TailCurve",
    "Trajectory",
    "WindowedNodes",
    "brownian_path",
    "chernoff_poisson_threshold",
    "map_trials",
    "required_buffer",
    "sample_poisson_points",
    "stationarity_check",
    "step_brownian",
    "tail_from_steps",
]
