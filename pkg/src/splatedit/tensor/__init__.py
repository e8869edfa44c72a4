from .engine import (Tensor, backward, broadcast_to, clip, concat, custom_op,
                     getitem, grad_of, layernorm, matmul, maximum_const,
                     no_grad, reshape, scatter_add_rows, sigmoid, silu,
                     softmax_lastdim, swap_last2, swiglu_mlp, take_rows,
                     texp, tlog, tmean, transpose, tsqrt, tsum, ttanh)
from .nn import (LayerNorm, Linear, Module, MultiHeadAttention, Parameter,
                 SwiGLU, TransformerBlock, merge_heads,
                 scaled_dot_attention, split_heads)
from .checkpoint import load_weights, save_weights

__all__ = [
    "Tensor", "backward", "grad_of", "no_grad", "custom_op",
    "matmul", "reshape", "transpose", "swap_last2", "concat", "getitem",
    "take_rows", "scatter_add_rows", "broadcast_to",
    "tsum", "tmean", "texp", "tlog", "tsqrt", "ttanh", "sigmoid", "silu",
    "clip", "maximum_const", "softmax_lastdim", "layernorm", "swiglu_mlp",
    "Module", "Parameter", "Linear", "LayerNorm", "SwiGLU",
    "MultiHeadAttention", "TransformerBlock",
    "split_heads", "merge_heads", "scaled_dot_attention",
    "save_weights", "load_weights",
]
