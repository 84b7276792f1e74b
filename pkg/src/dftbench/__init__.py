"""Toy diffusion-transformer fine-tuning bench in pure numpy."""

from .model import DiT, DiTConfig, wrap_modulation
from .schedule import NoiseSchedule, build_schedule
from .tensor import Tensor, load_checkpoint, save_checkpoint

__all__ = ["DiT", "DiTConfig", "NoiseSchedule", "Tensor", "build_schedule",
           "load_checkpoint", "save_checkpoint", "wrap_modulation"]
__version__ = "0.1.0"
