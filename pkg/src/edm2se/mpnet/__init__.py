"""Magnitude-preserving network primitives and the toy denoiser."""

from .gradcheck import grad_check
from .layers import Parameter, force_norm, mp_add, mp_cat, mp_silu, mp_sum, normalize_weight
from .net import DenoiserNet, NetConfig
from .tensor import Tensor, no_grad

__all__ = [
    "DenoiserNet",
    "NetConfig",
    "Parameter",
    "Tensor",
    "force_norm",
    "grad_check",
    "mp_add",
    "mp_cat",
    "mp_silu",
    "mp_sum",
    "no_grad",
    "normalize_weight",
]
