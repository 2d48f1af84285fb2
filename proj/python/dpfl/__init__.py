"""Federated learning simulator under dynamic client participation."""

import json

from ._core import (
    ConfigError,
    Error,
    NumericError,
    ParseError,
    ShapeError,
    ValidationError,
    __version__,
    heterogeneity_alpha,
    instability,
    intransigence,
    report,
    resolve_config,
    softmax_kl,
    stationary_distribution,
    windowed_eval,
)
from . import _core


def _text(config):
    return config if isinstance(config, str) else json.dumps(config)


def run_experiment(config, output_dir=None):
    """Run every seed of one cell. `config` is a dict or JSON text."""
    return _core.run_experiment(_text(config), output_dir)


def run_matrix(config, output_dir=None):
    return _core.run_matrix(_text(config), output_dir)


def simulate(config, seed):
    return _core.simulate(_text(config), seed)


__all__ = [
    "ConfigError",
    "Error",
    "NumericError",
    "ParseError",
    "ShapeError",
    "ValidationError",
    "__version__",
    "heterogeneity_alpha",
    "instability",
    "intransigence",
    "report",
    "resolve_config",
    "run_experiment",
    "run_matrix",
    "simulate",
    "softmax_kl",
    "stationary_distribution",
    "windowed_eval",
]
