"""Tensor engine, transformer blocks, optimizer and gradient checker."""
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import (
    EncoderLayer,
    EncoderStack,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    multi_head_attention,
    positional_encoding,
)
from .optim import RMSprop
from .tensor import (
    Tensor,
    add,
    broadcast_to,
    cross_entropy,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    stack_sum,
    swapaxes,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
