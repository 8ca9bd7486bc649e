"""Learned image codec with dynamic (deformable) kernels and an asymmetric context model."""

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import NumericFailure, compress, decompress
from .entropy_model import ASYMMETRIC_SCHEDULE, CodingSchedule, EntropyConfig, build_schedule
from .model import DKIC, ModelConfig
from .range_coder import Bitstream, BitstreamError, pack_bitstream, unpack_bitstream
from .transform import TransformConfig

__version__ = "0.1.0"

__all__ = [
    "ASYMMETRIC_SCHEDULE",
    "Bitstream",
    "BitstreamError",
    "CodingSchedule",
    "DKIC",
    "EntropyConfig",
    "ModelConfig",
    "NumericFailure",
    "TransformConfig",
    "build_schedule",
    "compress",
    "decompress",
    "load_checkpoint",
    "pack_bitstream",
    "save_checkpoint",
    "unpack_bitstream",
]
