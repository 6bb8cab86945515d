"""Real NVP normalizing flows on a small numpy autodiff engine."""

from .errors import ConfigError, DomainError, FormatError, NumericalDivergence, ShapeError
from .flow import FlowModel, build_image_flow, build_vector_flow
from .tensor import GradTape, Parameter, Tensor
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "ConfigError", "DomainError", "FormatError", "NumericalDivergence", "ShapeError",
    "FlowModel", "build_image_flow", "build_vector_flow",
    "GradTape", "Parameter", "Tensor",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
