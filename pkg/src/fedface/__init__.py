"""Federated training of a shared backbone with per-party heads.

Implements partially federated momentum (global momentum applied during
local steps and re-estimated from the aggregated model's displacement) and
federated validation (a small repeated random search over aggregation
weightings, scored by private validators).
"""

from .config import ExperimentConfig, load_config
from .fed_core import (
    HyperParams, ServerState, TrainerState, aggregate_and_update_momentum, backbone_step_pfm,
    classifier_step, run_local_round,
)
from .fv import FvParams, MovingStats, fv_round, grid_search, normalize_local, normalize_moving
from .model import BackboneSpec, Batch, HeadSpec, forward_features, gradient_check, loss_and_grads
from .params import axpy, dist_inf, weighted_sum
from .sim import compare, run

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "Batch", "ExperimentConfig", "FvParams", "HeadSpec", "HyperParams",
    "MovingStats", "ServerState", "TrainerState", "aggregate_and_update_momentum", "axpy",
    "backbone_step_pfm", "classifier_step", "compare", "dist_inf", "forward_features",
    "fv_round", "gradient_check", "grid_search", "load_config", "loss_and_grads",
    "normalize_local", "normalize_moving", "run", "run_local_round", "weighted_sum",
]
