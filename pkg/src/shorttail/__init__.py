"""Extreme expectile estimation for short-tailed distributions."""

__version__ = "0.1.0"

from .distributions import GEV, Beta, ModelSpec, PRESETS, SeededStream, ShortPowerLaw, preset, sample
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateSampleError,
    DomainError,
    EstimationError,
    ExtrapolationError,
    InfiniteEndpointError,
    ShortTailError,
)
from .expectile_core import ExpectileEstimate, Method, empirical_expectile, oracle_expectile
from .extreme_expectile import (
    ExtrapolationInputs,
    expectile_level_for_quantile,
    laws_extrapolated,
    qb_extrapolated,
)
from .tail_fit import TailFit, endpoint, extreme_quantile, fit_tail, select_k_path_stability
