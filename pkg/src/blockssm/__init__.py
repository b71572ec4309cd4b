"""Constrained, block-structured neural state space models."""
from .blocks import Block, BlockConfig
from .linmaps import SpectralBounds, make_map
from .objective import AdamW, Bounds, LossWeights
from .ssm import BlockSSM, ModelClass, SSMConfig, build_model

__version__ = "0.1.0"

__all__ = ["Block", "BlockConfig", "SpectralBounds", "make_map", "AdamW", "Bounds", "LossWeights",
           "BlockSSM", "ModelClass", "SSMConfig", "build_model"]
