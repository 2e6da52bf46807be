"""Dual-branch residual fusion segmentation for pre-/post-contrast
volumes, with a self-verifying numpy autodiff core."""

from .tensor import Tensor, no_grad
from .network import ModelConfig, DualBranchSegNet, build

__all__ = ["Tensor", "no_grad", "ModelConfig", "DualBranchSegNet", "build"]

__version__ = "0.1.0"
