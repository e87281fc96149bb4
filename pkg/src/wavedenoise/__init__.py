"""Speech denoising on raw waveforms with a non-causal, target-field Wavenet."""

from .dsp import AudioBuffer, read_wav, write_wav
from .model import (
    ConditionCode,
    ModelConfig,
    WavenetModel,
    build_model,
    denoise,
    forward,
    input_length,
    load_checkpoint,
    param_count,
    receptive_field,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "ConditionCode", "ModelConfig", "WavenetModel", "build_model", "denoise",
    "forward", "input_length", "load_checkpoint", "param_count", "read_wav", "receptive_field",
    "save_checkpoint", "write_wav",
]
