"""Desk-scale split federated learning simulator with step-wise momentum fusion."""

from .errors import ConfigurationError, DivergenceError, ShapeError, UsageError
from .optim import HistoryEntry, MomentumBuffer, OptimConfig, aligned_sgdm_step, fuse_momentum, nag_step, sgdm_step, staleness
from .protocols import (
    Federation,
    GlobalState,
    RoundCohort,
    RoundConfig,
    RoundRecord,
    aggregate_weighted,
    global_momentum_update,
    run_fedavg_round,
    run_sflv1_round,
    run_sflv2_round,
    run_smofi_round,
)
from .split import SplitModel, SubmodelPair, join, split
from .tensor import Batch, LayerSpec, ParamVector, backward, evaluate, forward, init_params, mlp

__version__ = "0.1.0"
