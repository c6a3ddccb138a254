from . import tensor
from .tensor import Tensor, backward, grad, no_grad, set_grad_enabled
from .layers import LayerSpec, LayerError, Network, spectral_normalize
from .optim import AdamState, adam_step, global_norm
from .serialize import save_network, load_network

__all__ = [
    "tensor",
    "Tensor",
    "backward",
    "grad",
    "no_grad",
    "set_grad_enabled",
    "LayerSpec",
    "LayerError",
    "Network",
    "spectral_normalize",
    "AdamState",
    "adam_step",
    "global_norm",
    "save_network",
    "load_network",
]
