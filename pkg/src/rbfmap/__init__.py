"""Kernelized RBF mapping blocks with a learnable metric, on a small numpy autodiff core."""
from .attacks import MNIST_ATTACKS, AdversarialBatch, AttackConfig, run_attack, transfer_attack
from .autodiff import Parameter, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_mnist_idx
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericalError,
    RbfMapError,
)
from .experiment import ExperimentConfig, diagnose_gradient_masking, run_experiment
from .metrics import separability
from .models import Model, build_orig, build_prop, feature_tap
from .rbf import RbfBlockConfig, rbf_block_forward
from .training import TrainConfig, train

__all__ = [
    "MNIST_ATTACKS", "AdversarialBatch", "AttackConfig", "run_attack", "transfer_attack",
    "Parameter", "Tape", "Tensor", "load_checkpoint", "save_checkpoint", "load_mnist_idx",
    "ConfigError", "ContractError", "DataError", "DimensionError", "FormatError",
    "NumericalError", "RbfMapError", "ExperimentConfig", "diagnose_gradient_masking",
    "run_experiment", "separability", "Model", "build_orig", "build_prop", "feature_tap",
    "RbfBlockConfig", "rbf_block_forward", "TrainConfig", "train",
]
