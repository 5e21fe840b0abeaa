"""Dense float64 tensors with reverse-mode differentiation for the network layers."""

from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, load_bundle, save_bundle
from .graph import GraphStateError, ModelGraph
from .spec import (
    MULTIPLY_CONVENTION,
    CompositionError,
    GraphSpec,
    LayerSpec,
    SpecError,
    count_multiplies,
    count_params,
    register_fixed_matrix,
    shift_sources,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "CompositionError",
    "GraphSpec",
    "GraphStateError",
    "LayerSpec",
    "MULTIPLY_CONVENTION",
    "ModelGraph",
    "SpecError",
    "adam_step",
    "count_multiplies",
    "count_params",
    "load_bundle",
    "register_fixed_matrix",
    "save_bundle",
    "shift_sources",
]
