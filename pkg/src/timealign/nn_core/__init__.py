"""Differentiable kernel library: thin checked wrappers over torch primitives,
hand-built bilinear sampling and modulated deformable convolution, windowed
attention blocks, a finite-difference gradient checker, and the named-tensor
parameter store / checkpoint format."""

from .kernels import (base_tap_grid, conv2d, deformable_conv, gelu,
                      grid_sample_bilinear, layer_norm, linear, softmax)
from .attention import SwinBlock, WindowAttentionConfig, attention_mask
from .gradcheck import GradcheckReport, gradcheck
from .params import (ParamStore, LoadReport, load_partial_checkpoint,
                     load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes)

__all__ = [
    "conv2d", "linear", "layer_norm", "softmax", "gelu",
    "grid_sample_bilinear", "deformable_conv", "base_tap_grid",
    "SwinBlock", "WindowAttentionConfig", "attention_mask",
    "gradcheck", "GradcheckReport",
    "ParamStore", "LoadReport", "load_partial_checkpoint",
    "save_tensor", "load_tensor", "tensor_to_bytes", "tensor_from_bytes",
]
