"""Centered purely random forests with simultaneous confidence bands."""

import json

from ._cprf import (
    CovTable,
    CprfError,
    Forest,
    approximate_covariance,
    covariance_matrix,
    fit_forest,
    load_cov_table,
    regression_value,
    sigma2_shen,
    sup_grid,
    sup_quantiles,
)
from ._cprf import run_experiments as _run_experiments

__all__ = [
    "CovTable",
    "CprfError",
    "Forest",
    "approximate_covariance",
    "covariance_matrix",
    "fit_forest",
    "load_cov_table",
    "regression_value",
    "run_experiment",
    "sigma2_shen",
    "sup_grid",
    "sup_quantiles",
]


def run_experiment(seed, cache_dir="", workers=0, **config):
    """Run one coverage experiment; keyword names follow the JSON config keys."""
    return _run_experiments(json.dumps(config), seed, cache_dir, workers)[0]
