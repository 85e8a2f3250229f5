"""Uncertainty-quantified magnetization models for Halbach dipole magnets.

The package builds Gaussian priors for per-block magnetization from
coil-based moment measurements, maps magnetization states to magnetic flux
density observables through analytic or finite-element forward models, and
updates the prior with field measurements either in closed form (linear
models) or by preconditioned Crank-Nicolson sampling (nonlinear models).
"""

from .constants import MU0
from .errors import ConfigError, HalbachError
from .geometry import (
    BlockPolygon,
    HalbachArray,
    N_BLOCKS,
    ParameterLayout,
    ParameterVector,
    build_default_array,
    nominal_angle_deg,
    nominal_magnetization,
    nominal_parameter_vector,
)

__all__ = [
    "MU0",
    "ConfigError",
    "HalbachError",
    "BlockPolygon",
    "HalbachArray",
    "N_BLOCKS",
    "ParameterLayout",
    "ParameterVector",
    "build_default_array",
    "nominal_angle_deg",
    "nominal_magnetization",
    "nominal_parameter_vector",
]

__version__ = "0.1.0"
