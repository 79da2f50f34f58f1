"""Mixed int4/int8 quantization-aware training for small Transformer encoders."""
from .errors import (
    CalibrationError,
    CheckpointError,
    ConfigError,
    ContractError,
    KernelBoundError,
    MixqError,
    ShapeError,
    TrainingDiverged,
)
from .model import EncoderConfig, LayerBitConfig, backward, forward, init_params
from .quant import QuantScale, fake_quantize, scale_grad_mse, scale_grad_ste

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "EncoderConfig",
    "KernelBoundError",
    "LayerBitConfig",
    "MixqError",
    "QuantScale",
    "ShapeError",
    "TrainingDiverged",
    "backward",
    "fake_quantize",
    "forward",
    "init_params",
    "scale_grad_mse",
    "scale_grad_ste",
]
