"""Tile-based differentiable rasterizer with two backward parallelizations."""

from splatstream.rasterizer.api import (
    ParamGrads,
    RasterOpts,
    RenderOutput,
    backward_pixelwise,
    backward_splatwise,
    rasterize_forward,
    replay_pixel_states,
)
from splatstream.rasterizer.projection import (
    Projected2D,
    Projection,
    chain_backward,
    project_gaussian,
    project_map,
)
from splatstream.rasterizer.tiles import TileIndex, build_tile_index

__all__ = [
    "ParamGrads",
    "Projected2D",
    "Projection",
    "RasterOpts",
    "RenderOutput",
    "TileIndex",
    "backward_pixelwise",
    "backward_splatwise",
    "build_tile_index",
    "chain_backward",
    "project_gaussian",
    "project_map",
    "rasterize_forward",
    "replay_pixel_states",
]
