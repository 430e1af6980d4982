"""Hard-constraint output layers for neural networks.

Guarantees satisfaction of input-dependent affine inequality systems
A(x) y <= b(x) of arbitrary row count through sub-constraint projection and
a trainable null-space component, with closed-form evaluation.
"""

from .constraints import (
    ComboMode,
    CombinationSet,
    ConstraintProvider,
    ConstraintSystem,
    combination_count,
    enumerate_combinations,
    select_sub,
    violation,
    violation_stats,
)
from .layer import (
    EmptyCandidateSetError,
    LayerConfig,
    ProjectionCandidate,
    SelectionRecord,
    backward,
    candidates,
    forward,
    project_sub,
)
from .linalg import pinv, spectral_norm, vec_pnorm
from .neural import AdamState, Mlp, adam_step
from .oracle import OracleResult, exact_projection, feasibility_check, solve_reference_program
from .training import ConstrainedModel, TrainConfig, train

__all__ = [
    "AdamState",
    "ComboMode",
    "CombinationSet",
    "ConstrainedModel",
    "ConstraintProvider",
    "ConstraintSystem",
    "EmptyCandidateSetError",
    "LayerConfig",
    "Mlp",
    "OracleResult",
    "ProjectionCandidate",
    "SelectionRecord",
    "TrainConfig",
    "adam_step",
    "backward",
    "candidates",
    "combination_count",
    "enumerate_combinations",
    "exact_projection",
    "feasibility_check",
    "forward",
    "pinv",
    "project_sub",
    "select_sub",
    "solve_reference_program",
    "spectral_norm",
    "train",
    "vec_pnorm",
    "violation",
    "violation_stats",
]
