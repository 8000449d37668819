from .tensor import (
    ShapeError,
    Tensor,
    add,
    clip_min,
    log,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    topo_order,
    tsum,
)
from .kernels import PROB_FLOOR, batch_norm, bias_add, conv2d, cross_entropy, max_pool2d, softmax, upsample2d
from .optim import Adam, MissingGradError, SGD, SGDMomentum, make_optimizer
from .gradcheck import finite_difference_check

__all__ = [
    "Adam",
    "MissingGradError",
    "PROB_FLOOR",
    "SGD",
    "SGDMomentum",
    "ShapeError",
    "Tensor",
    "add",
    "batch_norm",
    "bias_add",
    "clip_min",
    "conv2d",
    "cross_entropy",
    "finite_difference_check",
    "log",
    "make_optimizer",
    "matmul",
    "max_pool2d",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sub",
    "topo_order",
    "tsum",
    "upsample2d",
]
