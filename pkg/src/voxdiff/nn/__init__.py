"""Minimal reverse-mode autodiff over numpy arrays, plus layers and optimizers.

Hot paths run through BLAS matmuls (convolutions are decomposed into
shifted matmuls), so training stays fast on CPU without a deep-learning
framework dependency.
"""

from voxdiff.nn.autograd import (
    Tensor,
    absolute,
    clip,
    concat,
    conv3d,
    embedding,
    exp,
    log,
    matmul,
    no_grad,
    sigmoid,
    silu,
    softmax,
    tanh,
    tensor,
    upsample_nearest3,
)
from voxdiff.nn.modules import (
    Conv3d,
    Embedding,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    group_norm,
    layer_norm,
)
from voxdiff.nn.optim import Adam, cosine_lr

__all__ = [
    "Adam",
    "Conv3d",
    "Embedding",
    "GroupNorm",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "Tensor",
    "absolute",
    "clip",
    "concat",
    "conv3d",
    "cosine_lr",
    "embedding",
    "exp",
    "group_norm",
    "layer_norm",
    "log",
    "matmul",
    "no_grad",
    "sigmoid",
    "silu",
    "softmax",
    "tanh",
    "tensor",
    "upsample_nearest3",
]
