"""Reverse-mode autodiff and the layers used by the networks."""
from .autodiff import GraphError, Tensor, as_tensor, no_grad, parameter
from .layers import (
    CrossAttentionBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    TransformerConfig,
    TransformerEncoder,
)
from .optim import AdamW, adamw_update, load_checkpoint, save_checkpoint
