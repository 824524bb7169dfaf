"""Transformer-based inter-frame video codec with a real entropy-coded bitstream."""

from .config import ModelConfig, TrainConfig, config_hash, toy_config
from .model import VideoCodec

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "VideoCodec", "config_hash", "toy_config"]
