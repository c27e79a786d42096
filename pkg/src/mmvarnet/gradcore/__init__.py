"""Minimal reverse-mode differentiation over the operators the model needs."""
from .engine import Tape, Tensor, as_tensor, backward, grad, is_recording, no_record
from .check import dot_product_test, grad_check
from .params import ParamStore, count_params, load_params, save_params
from . import ops

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "grad", "is_recording", "no_record",
    "grad_check", "dot_product_test", "ParamStore", "count_params", "load_params",
    "save_params", "ops",
]
