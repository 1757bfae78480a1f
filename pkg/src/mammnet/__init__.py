"""Dual-view mammography lesion detection with cross-view fusion and lesion linking."""

from .config import LossWeights, ModelConfig, TrainConfig, load_config
from .datagen import PhantomConfig, generate_case, generate_dataset, load_dataset
from .estimator import MammNetDetector
from .model import MammNet, build_model
from .types import CaseAnnotation, ImagePair, InstanceGT

__version__ = "0.1.0"

__all__ = [
    "CaseAnnotation",
    "ImagePair",
    "InstanceGT",
    "LossWeights",
    "MammNet",
    "MammNetDetector",
    "ModelConfig",
    "PhantomConfig",
    "TrainConfig",
    "build_model",
    "generate_case",
    "generate_dataset",
    "load_config",
    "load_dataset",
]
