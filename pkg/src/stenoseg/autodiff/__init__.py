from . import ops
from .gradcheck import check_gradients
from .ops import elementwise, matmul, conv2d, layer_norm, resample
from .tensor import Tape, Tensor, backward, make_op, no_grad, precision, tensor

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "conv2d",
    "elementwise",
    "layer_norm",
    "make_op",
    "matmul",
    "no_grad",
    "ops",
    "precision",
    "resample",
    "tensor",
]
