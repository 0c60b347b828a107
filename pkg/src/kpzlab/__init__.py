"""kpzlab: Monte Carlo laboratory for exclusion-process growth scaling.

Exact continuous-time simulation of weakly asymmetric exclusion with
basic coupling and second-class particles, a stochastic-heat-equation
integrator with log (Hopf-Cole) transform, and a statistical harness
that verifies the exact current/variance identities and measures the
t^{2/3} fluctuation and t^{1/3} diffusivity exponents.
"""

__version__ = "0.1.0"

from .rng import RngStream, derive_stream
from .stats import (
    CheckRecord,
    FitResult,
    Histogram,
    MomentAccumulator,
    closest_integer,
    diffusivity,
    discrete_abs,
    fit_exponent,
    moment_of_histogram,
    reconstruct_var_from_S,
    weighted_var_integral,
)
from .wasep import (
    CurrentLedger,
    LatticeState,
    TrajectoryLog,
    Wasep,
    WasepParams,
    advance,
    buffer_half_width,
    discrete_laplacian,
    height,
    height_profile,
    init_bernoulli,
    micro_time,
    reflect_trajectory,
    scaled_height,
    v_eps,
)
from .coupling import (
    CoupledPair,
    DisplacementSample,
    advance_coupled,
    characteristic_speed,
    displacement_moment,
    estimate_S,
    flux,
    init_discrepancy,
)
from .she import (
    HopfColeField,
    SheGrid,
    SheParams,
    brownian_initial,
    cov_suite,
    current_mass,
    hopf_cole,
    increment_check,
    rescale_params,
)

__all__ = [name for name in dir() if not name.startswith("_")]
