"""Visuo-motor deep dynamic network: leaky convolutional vision, a slow
recurrent PFC layer and multiple-timescale motor layers, trained by BPTT on
a synthetic gesture-to-grasp task."""

__version__ = "0.1.0"

from .config import VMDNNConfig, check_config, desk_config, full_config, tiny_config, validate_config
from .errors import (CheckpointChecksumError, CheckpointError, CheckpointFormatError,
                     CheckpointTruncatedError, CheckpointVersionError, ConfigurationError,
                     DivergenceError, DomainError, VMDNNError)
from .network import (ParameterSet, count_parameters, forward_step, init_parameters, init_state,
                      run_closed_loop, run_open_loop)
from .training import TrainingConfig, bptt, finite_difference_check, sgd_step, train
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "__version__", "VMDNNConfig", "check_config", "validate_config", "desk_config", "full_config",
    "tiny_config", "ParameterSet", "count_parameters", "forward_step", "init_parameters", "init_state",
    "run_open_loop", "run_closed_loop", "TrainingConfig", "bptt", "finite_difference_check", "sgd_step",
    "train", "save_checkpoint", "load_checkpoint", "VMDNNError", "DomainError", "ConfigurationError",
    "DivergenceError", "CheckpointError", "CheckpointFormatError", "CheckpointVersionError",
    "CheckpointTruncatedError", "CheckpointChecksumError",
]
