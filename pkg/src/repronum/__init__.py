"""Joint estimation of reproduction numbers and count outliers.

Daily infection counts are modeled as Poisson draws whose intensity is the
reproduction number times a serial-interval-weighted sum of past counts,
plus a sparse outlier term.  The estimator minimizes a convex objective
(KL data fidelity, temporal second-difference and spatial graph total
variation on R, an l1 penalty on O) with a primal-dual splitting scheme
built from closed-form proximal operators.
"""

from .epidata import (
    LoadReport,
    load_counts,
    load_cumulative_wide,
    load_daily_long,
    load_graph,
    write_long,
)
from .errors import (
    DataError,
    DomainError,
    FormatError,
    GraphError,
    ParameterError,
    RepronumError,
)
from .model import (
    CountMatrix,
    Estimate,
    Hyperparameters,
    data_fidelity,
    kl_scalar,
    mle,
    objective,
    sliding_median_baseline,
    standardize,
)
from .operators import (
    DualVariable,
    EpiGraph,
    empty_graph,
    prox_f,
    prox_h_conj,
    prox_kl_scalar,
    prox_nonneg,
    prox_soft_threshold,
)
from .serial_interval import SerialInterval, convolve_past, discretize_gamma
from .solver import SolverConfig, run, smoothed_increment, solve_standardized, step_sizes
from .synth import ScenarioSpec, generate, oracle_solve, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "CountMatrix",
    "DataError",
    "DomainError",
    "DualVariable",
    "EpiGraph",
    "Estimate",
    "FormatError",
    "GraphError",
    "Hyperparameters",
    "LoadReport",
    "ParameterError",
    "RepronumError",
    "ScenarioSpec",
    "SerialInterval",
    "SolverConfig",
    "convolve_past",
    "data_fidelity",
    "discretize_gamma",
    "empty_graph",
    "generate",
    "kl_scalar",
    "load_counts",
    "load_cumulative_wide",
    "load_daily_long",
    "load_graph",
    "mle",
    "objective",
    "oracle_solve",
    "parse_scenario",
    "prox_f",
    "prox_h_conj",
    "prox_kl_scalar",
    "prox_nonneg",
    "prox_soft_threshold",
    "run",
    "sliding_median_baseline",
    "smoothed_increment",
    "solve_standardized",
    "standardize",
    "step_sizes",
    "write_long",
    "__version__",
]
