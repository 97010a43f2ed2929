"""Tile assignment and depth sorting for tile-based rasterization.

Every projected splat is duplicated into each tile its footprint touches;
pairs are sorted by (tile, depth, primitive index) so rendering order is
deterministic, equal depths breaking ties toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TileIndex:
    tile_size: int
    tiles_x: int
    tiles_y: int
    pair_splat: np.ndarray   # (P,) int32 projection-row index, sorted
    tile_range: np.ndarray   # (T+1,) int64 offsets into pair_splat per tile
    active_tiles: np.ndarray  # (A,) int64 tile ids with non-empty ranges

    def tile_origin(self, tile_id: int):
        ty, tx = divmod(int(tile_id), self.tiles_x)
        return tx * self.tile_size, ty * self.tile_size


def build_tile_index(proj, width: int, height: int, tile_size: int) -> TileIndex:
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    m = len(proj)
    if m == 0:
        return TileIndex(tile_size, tiles_x, tiles_y,
                         np.zeros(0, dtype=np.int32),
                         np.zeros(n_tiles + 1, dtype=np.int64),
                         np.zeros(0, dtype=np.int64))

    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius
    x0 = np.clip(np.floor((mx - r) / tile_size), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / tile_size), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((my - r) / tile_size), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / tile_size), 0, tiles_y - 1).astype(np.int64)
    wx = x1 - x0 + 1
    wy = y1 - y0 + 1
    counts = wx * wy
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])

    splat_of_pair = np.repeat(np.arange(m, dtype=np.int32), counts)
    local = np.arange(total, dtype=np.int64) - offsets[splat_of_pair]
    tx = x0[splat_of_pair] + local % wx[splat_of_pair]
    ty = y0[splat_of_pair] + local // wx[splat_of_pair]
    tile_id = ty * tiles_x + tx

    order = np.lexsort((splat_of_pair, proj.depth[splat_of_pair], tile_id))
    pair_splat = splat_of_pair[order]
    tile_sorted = tile_id[order]

    tile_range = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_sorted, minlength=n_tiles), out=tile_range[1:])
    active = np.flatnonzero(tile_range[1:] > tile_range[:-1]).astype(np.int64)
    return TileIndex(tile_size, tiles_x, tiles_y, pair_splat, tile_range, active)
