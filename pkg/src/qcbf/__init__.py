"""Robust Q-CBF safety filters from grid-solved Isaacs value functions and adversarial RL."""

from .core import Box, ClassKMap, ConfigurationError, ContractViolation, Grid, ScalarField, interpolate
from .dynamics import BlackBoxSystem, FrozenSystem, InvertedPendulum, PendulumConfig, with_dstb_box
from .filters import (
    ContinuousBarrier,
    CTCBFFilter,
    FilterOutput,
    LeastRestrictiveFilter,
    NoFilter,
    PDController,
    QCBFSafetyFilter,
    ct_cbf_filter,
    lrsf_filter,
    qcbf_filter,
)
from .harness import Trajectory, boundary_experiment, compute_set_metrics, deviation_stats, rollout
from .isaacs import (
    Certificate,
    IsaacsSolver,
    NonConvergenceError,
    SolveConfig,
    SolveDiagnostics,
    bellman_residual,
    fallback_action,
    interpolation_error,
    q_value,
    robust_q,
    solve,
    worst_disturbance,
)
from .learn import (
    AdversarialSafetyLearner,
    BestResponseConfig,
    Checkpoint,
    GridQCritic,
    NumericalAbort,
    TrainConfig,
    sign_agreement,
    train_best_response,
    train_isaacs,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
