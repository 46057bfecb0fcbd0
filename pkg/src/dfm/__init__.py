"""Blockwise discriminative flow matching on a small numpy autograd engine."""

from .config import TrainConfig, load_config
from .estimators import FlowMatchingClassifier, FlowMatchingDetector
from .model import FlowModel, build_baseline, build_model
from .trainer import train

__all__ = [
    "FlowMatchingClassifier",
    "FlowMatchingDetector",
    "FlowModel",
    "TrainConfig",
    "build_baseline",
    "build_model",
    "load_config",
    "train",
]

__version__ = "0.1.0"
