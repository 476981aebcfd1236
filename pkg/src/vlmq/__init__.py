"""Token-importance-weighted Hessian post-training quantization on a toy decoder."""

from .backward import block_backward, block_loss, gradients_to_importance, manual_importance
from .calib import CalibrationBatch, CalibrationSample, TokenRole, generate_batch
from .model import LayerWeights, ModelSpec, generate_model, model_forward
from .pipeline import PipelineConfig, eval_reconstruction, quantize_model
from .quant import QuantParams, fit_params, quant_dequant
from .solver import HessianState, Method, SolveConfig, accumulate_hessian, quantize_layer

__version__ = "0.1.0"

__all__ = [
    "CalibrationBatch",
    "CalibrationSample",
    "HessianState",
    "LayerWeights",
    "Method",
    "ModelSpec",
    "PipelineConfig",
    "QuantParams",
    "SolveConfig",
    "TokenRole",
    "accumulate_hessian",
    "block_backward",
    "block_loss",
    "eval_reconstruction",
    "fit_params",
    "generate_batch",
    "generate_model",
    "gradients_to_importance",
    "manual_importance",
    "model_forward",
    "quant_dequant",
    "quantize_layer",
    "quantize_model",
]
