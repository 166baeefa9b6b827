"""Model-based deep learning core: solvers, unfolded networks, filters and experiment runs."""

from ._core import (
    ConfigError,
    NumericalError,
    ShapeError,
    admm,
    config_hash,
    fista,
    ista,
    kalman_filter,
    lasso_objective,
    lista_forward,
    lorenz_transition,
    lqr_gain,
    methods,
    resolve_config,
    run_experiment,
    simulate,
    soft_threshold,
    solve,
)

__all__ = [
    "ConfigError",
    "NumericalError",
    "ShapeError",
    "admm",
    "config_hash",
    "fista",
    "ista",
    "kalman_filter",
    "lasso_objective",
    "lista_forward",
    "lorenz_transition",
    "lqr_gain",
    "methods",
    "resolve_config",
    "run_experiment",
    "simulate",
    "soft_threshold",
    "solve",
]
