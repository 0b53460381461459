"""Dual-encoder video quality assessment with a prefix-LM text decoder.

A high-level encoder sees a low-resolution view of each key frame, a
low-level encoder sees native-resolution patches. A regression head turns
their tokens into a quality score and a small decoder writes a description.
"""

from .config import ConfigError, ModelConfig, RunConfig, TrainingConfig, load_config
from .model import VQAModel

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "TrainingConfig", "VQAModel", "load_config"]
__version__ = "0.1.0"
