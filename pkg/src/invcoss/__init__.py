"""Inversion-driven continual self-supervised learning at desk scale."""

from .config import RunConfig
from .continual import run_sequence
from .encoder import EncoderConfig, MimModel
from .inversion import InversionConfig, invert_task

__all__ = ["EncoderConfig", "InversionConfig", "MimModel", "RunConfig", "invert_task", "run_sequence"]
__version__ = "0.1.0"
