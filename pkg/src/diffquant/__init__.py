"""Differentiable quantization: learnable uniform and power-of-two quantizers,
a layer memory model and memory-constrained training on numpy."""
from .cost import (
    LayerSpec,
    NetworkSpec,
    PenaltyConfig,
    auto_lambda,
    layer_costs,
    load_network_spec,
    network_memory,
    penalty,
    smooth_bitwidth,
)
from .quantizer import (
    EffectiveParams,
    Family,
    ParamBounds,
    Parametrization,
    Quantizer,
    QuantizerError,
    backward,
    empirical_hessian,
    forward,
    infer_bitwidth,
    max_grad_norm_curve,
    project,
    quantize_tensor,
    quantize_tensor_backward,
)

__all__ = [
    "EffectiveParams", "Family", "LayerSpec", "NetworkSpec", "ParamBounds", "Parametrization",
    "PenaltyConfig", "Quantizer", "QuantizerError", "auto_lambda", "backward",
    "empirical_hessian", "forward", "infer_bitwidth", "layer_costs", "load_network_spec",
    "max_grad_norm_curve", "network_memory", "penalty", "project", "quantize_tensor",
    "quantize_tensor_backward", "smooth_bitwidth",
]
