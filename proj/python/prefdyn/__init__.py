"""Python bindings for the prefdyn C++ core."""

import json as _json

from ._prefdyn import (
    Block,
    ConfigError,
    DegenerateGradientError,
    GenerationError,
    PolicyKind,
    SplitPolicy,
    classify,
    displacement_task,
    dpo_loss,
    margin_z,
    measure_deltas,
    predict_deltas,
    reg_term,
    sft_loss,
    train,
)
from . import _prefdyn


def verify(seed=0, gradient_instances=200, audit_instances=1000):
    """Runs the property suite and returns the report as a dict."""
    return _json.loads(_prefdyn.verify(seed, gradient_instances, audit_instances))


def run_command(command, config, out):
    """Runs a CLI subcommand in-process; returns its exit code."""
    return _prefdyn.run_command(command, _json.dumps(config), str(out))


__all__ = [
    "Block",
    "ConfigError",
    "DegenerateGradientError",
    "GenerationError",
    "PolicyKind",
    "SplitPolicy",
    "classify",
    "displacement_task",
    "dpo_loss",
    "margin_z",
    "measure_deltas",
    "predict_deltas",
    "reg_term",
    "run_command",
    "sft_loss",
    "train",
    "verify",
]
