"""Posterior sampling with invertible coupling networks and ensemble MCMC."""

import json

from ._core import (
    FlowModel,
    ForwardModel,
    Measurement,
    NumericalError,
    PriorBox,
    ShapeError,
    boundary_loss,
    build_flow,
    iact,
    ks_standard_normal,
    ks_two_sample,
    log_likelihood,
    run_sampler,
    synthesize_measurement,
    train_inn_and_sample,
)
from . import _core


def compare(a, b):
    """Per-coordinate comparison of two draw matrices (rows are draws)."""
    return json.loads(_core.compare(a, b))


def run_experiment(config, out_dir=""):
    """Run the full study; config is a dict or a JSON string."""
    text = config if isinstance(config, str) else json.dumps(config)
    config_hash, reports = _core.run_experiment(text, out_dir)
    return config_hash, [json.loads(r) for r in reports]


__all__ = [
    "FlowModel",
    "ForwardModel",
    "Measurement",
    "NumericalError",
    "PriorBox",
    "ShapeError",
    "boundary_loss",
    "build_flow",
    "compare",
    "iact",
    "ks_standard_normal",
    "ks_two_sample",
    "log_likelihood",
    "run_experiment",
    "run_sampler",
    "synthesize_measurement",
    "train_inn_and_sample",
]
