"""PDSE: one-stage CT lesion detector with path aggregation and deformable
squeeze-and-excitation blocks, built on a self-contained numpy autograd."""

from .estimator import LesionDetector
from .network import ModelConfig, PDSENet
from .postprocess import DetectionBox
from .tensor import Tensor
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "DetectionBox",
    "LesionDetector",
    "ModelConfig",
    "PDSENet",
    "Tensor",
    "TrainConfig",
    "__version__",
]
