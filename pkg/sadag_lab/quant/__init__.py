"""Fake quantization of the teacher: weight and activation quantizers plus the quantized net."""

from .quantizers import (
    FULL_PRECISION_BITS,
    ActivationQuantizer,
    BetaSchedule,
    WeightQuantizer,
    compute_scale,
    quantize_adaround,
    quantize_nearest,
    rectified_sigmoid,
    round_regularizer,
)
from .quantnet import QuantLayer, QuantNet, default_bit_map, init_quantnet

__all__ = [
    "FULL_PRECISION_BITS",
    "ActivationQuantizer",
    "BetaSchedule",
    "QuantLayer",
    "QuantNet",
    "WeightQuantizer",
    "compute_scale",
    "default_bit_map",
    "init_quantnet",
    "quantize_adaround",
    "quantize_nearest",
    "rectified_sigmoid",
    "round_regularizer",
]
