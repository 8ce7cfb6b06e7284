"""Dense tensors, neural primitives and reverse-mode autodiff."""

from . import ops
from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .io import read_tns, write_tns
from .module import Module, load_checkpoint, read_manifest, save_checkpoint
from .ops import (
    bce_with_logits,
    concat,
    conv2d,
    cross_entropy,
    depthwise_conv2d,
    einsum,
    layer_norm,
    linear,
    silu,
    softplus,
    stack,
    upsample_nearest,
)
from .tensor import (
    Parameter,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "GradCheckReport",
    "Module",
    "Parameter",
    "Tensor",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d",
    "cross_entropy",
    "depthwise_conv2d",
    "einsum",
    "finite_diff_check",
    "get_default_dtype",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "no_grad",
    "ops",
    "precision",
    "read_manifest",
    "read_tns",
    "relative_error",
    "save_checkpoint",
    "set_default_dtype",
    "silu",
    "softplus",
    "stack",
    "upsample_nearest",
    "write_tns",
]
