"""RAP-Net: recurrent attention pooling networks for dialogue response selection."""

from .mcan import AblationFlags
from .model import Model
from .tensor import Tape, Tensor, grad_check

__all__ = ["AblationFlags", "Model", "Tape", "Tensor", "grad_check"]
