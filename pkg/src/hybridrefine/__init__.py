"""Selective-refinement scheduler for hybrid regression/diffusion view synthesis."""

from .core import ConfigurationError, ImageFrame, InvalidArgument, build_schedule, decode, encode
from .quality import KLogic, interpolate_reference, quality_ratio, score_image, select_k

__all__ = [
    "ConfigurationError",
    "ImageFrame",
    "InvalidArgument",
    "KLogic",
    "build_schedule",
    "decode",
    "encode",
    "interpolate_reference",
    "quality_ratio",
    "score_image",
    "select_k",
]

__version__ = "0.1.0"
