"""Jointly trained speech enhancement front-ends and keyword spotting."""

from . import dsp  # registers the fixed Mel and DCT matrices
from .engine import GraphSpec, LayerSpec, ModelGraph, count_multiplies, count_params

__version__ = "0.1.0"

__all__ = ["GraphSpec", "LayerSpec", "ModelGraph", "count_multiplies", "count_params", "dsp"]
