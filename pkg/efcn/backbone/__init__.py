from .layers import (
    ConvSpec,
    PoolSpec,
    conv_backward,
    conv_forward,
    deconv_backward,
    deconv_forward,
    maxpool_backward,
    maxpool_forward,
)
from .network import Architecture, Backbone, BackboneTrace, LayerDef, SkipDef

__all__ = [
    "Architecture",
    "Backbone",
    "BackboneTrace",
    "ConvSpec",
    "LayerDef",
    "PoolSpec",
    "SkipDef",
    "conv_backward",
    "conv_forward",
    "deconv_backward",
    "deconv_forward",
    "maxpool_backward",
    "maxpool_forward",
]
