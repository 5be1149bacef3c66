"""Backdoor attacks and defenses for deep time-series classifiers."""

from .attacks import ATTACKS, AttackConfig, PoisonedDataset, train_tsba, train_universal
from .data import ConfigurationError, Dataset, DatasetError, SyntheticSpec, load_dataset, make_synthetic
from .models import CheckpointError, Network, build_classifier, build_trigger_generator, build_universal_generator
from .training import NumericalDivergenceError, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ATTACKS",
    "AttackConfig",
    "CheckpointError",
    "ConfigurationError",
    "Dataset",
    "DatasetError",
    "Network",
    "NumericalDivergenceError",
    "PoisonedDataset",
    "SyntheticSpec",
    "TrainConfig",
    "build_classifier",
    "build_trigger_generator",
    "build_universal_generator",
    "load_dataset",
    "make_synthetic",
    "train_tsba",
    "train_universal",
]
