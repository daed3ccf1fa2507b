"""Multi-scale shared-window attention over 3-D latent token grids."""

__version__ = "0.1.0"

from .attention import AttnWeights, ModelDims, full_attention_backward, full_attention_forward
from .grid import (
    GridDims,
    LayerConfig,
    LayerSchedule,
    PlanError,
    ScalePlan,
    WindowShape,
    boundary_scale_strides,
    build_layer_schedule,
    build_scale_plan,
    make_layer_config,
    membership,
    validate_tiling,
)
from .t3 import T3Layer, masked_attention_oracle, t3_backward, t3_forward

__all__ = [
    "AttnWeights",
    "GridDims",
    "LayerConfig",
    "LayerSchedule",
    "ModelDims",
    "PlanError",
    "ScalePlan",
    "T3Layer",
    "WindowShape",
    "boundary_scale_strides",
    "build_layer_schedule",
    "build_scale_plan",
    "full_attention_backward",
    "full_attention_forward",
    "make_layer_config",
    "masked_attention_oracle",
    "membership",
    "t3_backward",
    "t3_forward",
    "validate_tiling",
]
