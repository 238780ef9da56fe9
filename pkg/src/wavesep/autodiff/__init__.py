"""Minimal reverse-mode differentiation over numpy arrays."""

from . import ops
from .checkpoint import load_checkpoint, pack_config, save_checkpoint, unpack_config
from .lstm import bilstm_forward, bilstm_layer
from .optim import AdamState, adam_step
from .params import Param, he_init, rescale_param, zero_grads
from .tensor import Tensor, as_tensor, backward, no_grad, precision

__all__ = [
    "AdamState", "Param", "Tensor", "adam_step", "as_tensor", "backward", "bilstm_forward",
    "bilstm_layer", "he_init", "load_checkpoint", "no_grad", "ops", "pack_config", "precision",
    "rescale_param", "save_checkpoint", "unpack_config", "zero_grads",
]
