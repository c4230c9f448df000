"""Gradient-driven structural adaptation (DIRAD) and prediction-validation
continual learning (PREVAL) on minimal-complexity DAG networks."""

from .network import INPUT, MODULATORY, OUTPUT, Network, NetworkError
from .engine import (
    aggregate,
    apply_updates,
    backward_pass,
    batch_cost,
    finite_difference_oracle,
    forward_pass,
)
from .growth import GrowthConfig, StepReport, adaptation_step
from .preval import Model, PrevalConfig, PrevalSystem, stabilize_check
from .harness import (
    RunResult,
    aggregate_accuracies,
    compute_retention,
    run_continual,
    run_xor,
)

__version__ = "0.1.0"

__all__ = [
    "INPUT",
    "MODULATORY",
    "OUTPUT",
    "Network",
    "NetworkError",
    "forward_pass",
    "backward_pass",
    "batch_cost",
    "aggregate",
    "apply_updates",
    "finite_difference_oracle",
    "GrowthConfig",
    "StepReport",
    "adaptation_step",
    "Model",
    "PrevalConfig",
    "PrevalSystem",
    "stabilize_check",
    "RunResult",
    "run_xor",
    "run_continual",
    "aggregate_accuracies",
    "compute_retention",
    "__version__",
]
