"""Minimal deterministic tensor library with reverse-mode differentiation."""

from promptiml.tensor.core import Tensor, concat, grad_enabled, no_grad, roll, split, stack, tensor
from promptiml.tensor.functional import (
    bilinear_sample,
    conv2d,
    layer_norm,
    linear,
    pad2d_edge,
    resize_bilinear,
    sample_nhwc,
    softmax,
)
from promptiml.tensor.gradcheck import check_leaves, finite_diff_check
from promptiml.tensor.kernels import BACKEND

__all__ = [
    "BACKEND",
    "Tensor",
    "bilinear_sample",
    "check_leaves",
    "concat",
    "conv2d",
    "finite_diff_check",
    "grad_enabled",
    "layer_norm",
    "linear",
    "no_grad",
    "pad2d_edge",
    "resize_bilinear",
    "roll",
    "sample_nhwc",
    "softmax",
    "split",
    "stack",
    "tensor",
]
