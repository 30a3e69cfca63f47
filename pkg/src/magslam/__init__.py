"""Magnetic-field GP-SLAM: strapdown odometry fused with a Gaussian-process field map."""

from .core_types import ImuRecord, MagRecord, NavState, NoiseParams, Quaternion
from .kernels import Hyperparams, Kernel

__version__ = "0.1.0"

__all__ = ["ImuRecord", "MagRecord", "NavState", "NoiseParams", "Quaternion", "Hyperparams", "Kernel"]
