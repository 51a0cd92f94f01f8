"""Impulse control with Bayesian learning of an unknown reaction parameter."""

from .bayes import ParameterSet, Prior, bayes_update, normalize, predictive_density
from .model import (
    GainSpec,
    Impulse,
    ModelSpec,
    State,
    Wait,
    make_censored_execution_model,
    make_gaussian_impact_model,
)
from .numerics import BeyondHorizon, GridSpec, ValueField, build_grids, interpolate, next_grid_time
from .policy import Policy, extract_policy, lookup
from .sim import evaluate_mc, simulate
from .solver import (
    ComparisonCertificate,
    SolverSettings,
    apply_impulse_operator,
    backward_induction,
    check_certificate,
    qvi_residuals,
    terminal_layer,
)

__version__ = "0.1.0"
