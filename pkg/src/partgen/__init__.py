"""Part-based cuboid shape generation with an autoregressive set transformer
and a cross-attention occupancy blender."""

__version__ = "0.1.0"
