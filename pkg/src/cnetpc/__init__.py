"""Lossless point cloud geometry and colour coding with causal sparse context models."""

from .codec import DecodeError, ModelMismatchError, decode, encode, stats
from .models import ModelBundle, ModelConfig
from .pcloud import RawPointCloud, SparseTensor, load_ply, voxelize, write_ply

__version__ = "0.1.0"

__all__ = [
    "DecodeError",
    "ModelBundle",
    "ModelConfig",
    "ModelMismatchError",
    "RawPointCloud",
    "SparseTensor",
    "decode",
    "encode",
    "load_ply",
    "stats",
    "voxelize",
    "write_ply",
]
