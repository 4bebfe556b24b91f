from sfnet.model.layers import BatchNorm2d, Conv2d, Linear, Module
from sfnet.model.sfnet import (
    CBAM,
    FCL,
    HFRF,
    VARIANTS,
    ChannelAttention,
    FrequencyExtractor,
    ImageExtractor,
    ProjectionUnit,
    Refine,
    RefineGroup,
    SFNet,
    SFNetConfig,
    SpatialAttention,
)

__all__ = [
    "BatchNorm2d",
    "CBAM",
    "ChannelAttention",
    "Conv2d",
    "FCL",
    "FrequencyExtractor",
    "HFRF",
    "ImageExtractor",
    "Linear",
    "Module",
    "ProjectionUnit",
    "Refine",
    "RefineGroup",
    "SFNet",
    "SFNetConfig",
    "SpatialAttention",
    "VARIANTS",
]
