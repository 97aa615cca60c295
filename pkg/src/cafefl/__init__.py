"""Drift-aware federated learning simulator with hand-written gradients."""

from .causal import CalibrationParams, SnapshotRing
from .config import ExperimentConfig, load_config
from .drift import DriftDirections, DriftState, decompose
from .federation import run_experiment
from .model import ModelParams, init_params

__all__ = [
    "CalibrationParams", "SnapshotRing", "ExperimentConfig", "load_config", "DriftDirections",
    "DriftState", "decompose", "run_experiment", "ModelParams", "init_params",
]
