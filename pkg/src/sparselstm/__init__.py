"""Bayesian sparsification of LSTMs with variational dropout on weights and groups."""

from .compression import (
    PrunedModel,
    apply_pruning,
    compression_rate,
    count_active_neurons,
    count_nonconstant_gates,
    load_checkpoint,
    save_checkpoint,
)
from .inference import compile_model, fast_forward
from .sparse_lstm import ModelConfig, SparseLSTMModel
from .training import TrainConfig, evaluate, init_model, train

__all__ = [
    "ModelConfig",
    "PrunedModel",
    "SparseLSTMModel",
    "TrainConfig",
    "apply_pruning",
    "compile_model",
    "compression_rate",
    "count_active_neurons",
    "count_nonconstant_gates",
    "evaluate",
    "fast_forward",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
