"""Collaborative attention network for person re-identification, on a small numpy autodiff core."""
from .model import BackboneConfig, BranchSpec, CanModel, build_model, inference_descriptor
from .tensor import Parameter, Tape, Tensor
from .train import TrainConfig, lr_at, paper_config, train

__all__ = [
    "BackboneConfig", "BranchSpec", "CanModel", "build_model", "inference_descriptor",
    "Parameter", "Tape", "Tensor", "TrainConfig", "lr_at", "paper_config", "train",
]
__version__ = "0.1.0"
