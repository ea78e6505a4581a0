"""Multimodal RGB-depth-thermal terrain segmentation toolkit."""

from .config import ModelConfig
from .data import ClassSet, DatasetManifest, load_manifest
from .metrics import ConfusionMatrix, MetricsReport
from .model import SegmentationModel
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ClassSet",
    "ConfusionMatrix",
    "DatasetManifest",
    "MetricsReport",
    "ModelConfig",
    "SegmentationModel",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "load_manifest",
    "no_grad",
    "train",
    "__version__",
]
