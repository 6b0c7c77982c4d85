"""Deformable audio transformer with a learnable input adaptor, on a small numpy autodiff core."""
from .autodiff import Tensor, backward, grad_check
from .backbone import DATAR, ModelConfig, StageSpec, count_macs
from .kernels import BACKEND

__all__ = ["BACKEND", "DATAR", "ModelConfig", "StageSpec", "Tensor", "backward", "count_macs", "grad_check"]
__version__ = "0.1.0"
