"""Masked spectrogram modeling: a small numpy ViT foundation model for radio data."""

from .errors import (ConfigError, ContractError, DegenerateDataError, DivergenceError, FormatError,
                     ShapeError, ShortRecordingWarning)
from .estimators import FrozenEncoderClassifier, FrozenEncoderSegmenter, MaskedSpectrogramModel
from .vit import PRESETS, MsmModel, VitConfig, count_params, preset

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateDataError", "DivergenceError", "FormatError",
    "ShapeError", "ShortRecordingWarning",
    "FrozenEncoderClassifier", "FrozenEncoderSegmenter", "MaskedSpectrogramModel",
    "PRESETS", "MsmModel", "VitConfig", "count_params", "preset",
]
