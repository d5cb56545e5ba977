"""IV estimation and pessimistic planning for strategic MDPs.

Array routines take and return NumPy arrays; configuration objects are plain dicts.
"""

import json as _json

from . import _plan_iv
from ._plan_iv import (
    RESULTS_HEADER,
    ConfigError,
    NumericalError,
    app_names,
    fit_2sls,
    kernel_iv_fitted,
    lcb,
    minimax_loss_linear,
    naive_ols,
    projected_mse,
)

__all__ = [
    "RESULTS_HEADER",
    "ConfigError",
    "NumericalError",
    "app_names",
    "bench",
    "collect",
    "fit",
    "fit_2sls",
    "gen",
    "kernel_iv_fitted",
    "lcb",
    "minimax_loss_linear",
    "naive_ols",
    "plan",
    "projected_mse",
    "report",
    "run_pipeline",
    "threshold_linear",
]


def _dump(obj):
    return _json.dumps(obj if obj is not None else {})


def threshold_linear(config=None, x=1.0):
    return _plan_iv.threshold_linear(_dump(config), x)


def collect(app, K, seed, params=None):
    """Offline dataset as a list of records with "obs" and "hidden" sections."""
    text = _plan_iv.collect_ndjson(app, _dump(params), K, seed)
    return [_json.loads(line) for line in text.splitlines() if line]


def run_pipeline(app, K, seed, params=None, settings=None):
    """Metrics and plan for the IV and OLS estimators on one dataset."""
    return _json.loads(_plan_iv.run_pipeline(app, _dump(params), K, seed, _dump(settings)))


def gen(config):
    return _plan_iv.cmd_gen(_dump(config))


def fit(config):
    return _json.loads(_plan_iv.cmd_fit(_dump(config)))


def plan(config):
    return _json.loads(_plan_iv.cmd_plan(_dump(config)))


def bench(config):
    """Runs the sweep and returns the number of rows written to results.csv."""
    return _plan_iv.cmd_bench(_dump(config))


def report(config):
    return _json.loads(_plan_iv.cmd_report(_dump(config)))
