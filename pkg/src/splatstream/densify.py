"""Geometry seeding, gradient-driven clone/split, and opacity pruning.

New keyframes contribute colored points that become isotropic primitives
sized by their 3-nearest-neighbor spacing. Between densification events
the map accumulates per-primitive screen-space positional gradient norms;
primitives whose mean norm exceeds the threshold are cloned (small ones)
or split in two (large ones), then everything below the opacity floor is
pruned. Runs only on the trainer thread between optimization steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from splatstream.core import GaussianMap, logit
from splatstream.sh import SH_C0

INIT_OPACITY = 0.1
MIN_SEED_SCALE = 1e-4


@dataclass
class DensifyConfig:
    interval: int = 500              # iterations between densification events
    grad_threshold: float = 0.001    # mean 2D positional gradient norm trigger
    prune_opacity: float = 0.02      # activated-opacity floor
    split_scale_percentile: float = 0.01  # of scene extent; clone below, split above
    split_children: int = 2
    split_scale_shrink: float = 1.6
    clone_step: float = 0.01         # clone offset along -mean position gradient

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("densify interval must be >= 1")
        if self.grad_threshold <= 0 or self.prune_opacity <= 0:
            raise ValueError("densify thresholds must be positive")


@dataclass
class DensifyResult:
    """Index bookkeeping for resizing optimizer state after an event."""

    survivors: np.ndarray  # original indices kept, in original order
    n_new: int
    n_cloned: int
    n_split: int
    n_pruned: int


def seed_from_points(points: np.ndarray, colors: np.ndarray,
                     scene_extent: float = 1.0):
    """Convert a colored point cloud into initialized primitive arrays.

    One isotropic primitive per point: scale from the mean distance to the
    3 nearest neighbors within the incoming cloud (floored at 1e-4; a
    lone point falls back to 1% of the scene extent), identity rotation,
    opacity 0.1, DC color from the inverse of the +0.5 SH offset.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        return (np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                np.zeros(0), np.zeros((0, 16, 3)))
    if not np.isfinite(points).all():
        raise ValueError("non-finite point in seed cloud")
    if n == 1:
        mean_dist = np.array([0.01 * scene_extent])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        mean_dist = dist[:, 1:].mean(axis=1)
    log_scales = np.log(np.maximum(mean_dist, MIN_SEED_SCALE))[:, None].repeat(3, axis=1)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, logit(INIT_OPACITY))
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    return points.copy(), rotations, log_scales, opacity_logits, sh


def accumulate_grad_stats(gmap: GaussianMap, grads) -> GaussianMap:
    """Fold one backward pass into the running densification statistics.

    Only primitives that contributed to the render advance their
    observation count; the mean gradient norm is taken over those counts
    at densification time.
    """
    if len(grads) != len(gmap):
        raise ValueError(
            f"gradient length {len(grads)} does not match map length {len(gmap)}")
    seen = grads.contributed
    gmap.grad2d_accum[seen] += grads.pos2d_grad_norm[seen]
    gmap.grad3d_accum[seen] += grads.position[seen]
    gmap.obs_count[seen] += 1
    return gmap


def densify_and_prune(gmap: GaussianMap, config: DensifyConfig,
                      scene_extent: float, rng=None) -> DensifyResult:
    """Clone/split primitives with large accumulated gradients, then prune
    low-opacity primitives and reset the statistics."""
    if rng is None:
        rng = np.random.default_rng()
    n0 = len(gmap)
    counts = np.maximum(gmap.obs_count, 1)
    mean_norm = gmap.grad2d_accum / counts
    mean_g3d = gmap.grad3d_accum / counts[:, None]

    candidates = (mean_norm > config.grad_threshold) & (gmap.obs_count > 0)
    max_scale = gmap.scales().max(axis=1) if n0 else np.zeros(0)
    small = candidates & (max_scale <= config.split_scale_percentile * scene_extent)
    large = candidates & ~small

    new_parts = []

    clone_idx = np.flatnonzero(small)
    if clone_idx.size:
        new_parts.append((
            gmap.positions[clone_idx] - config.clone_step * mean_g3d[clone_idx],
            gmap.rotations[clone_idx].copy(),
            gmap.log_scales[clone_idx].copy(),
            gmap.opacity_logits[clone_idx].copy(),
            gmap.sh[clone_idx].copy(),
        ))

    split_idx = np.flatnonzero(large)
    if split_idx.size:
        from splatstream.core import quat_to_rotation

        rep = np.repeat(split_idx, config.split_children)
        R = quat_to_rotation(gmap.rotations[rep])
        local = rng.standard_normal((rep.size, 3)) * np.exp(gmap.log_scales[rep])
        positions = gmap.positions[rep] + np.einsum("nij,nj->ni", R, local)
        new_parts.append((
            positions,
            gmap.rotations[rep].copy(),
            gmap.log_scales[rep] - np.log(config.split_scale_shrink),
            gmap.opacity_logits[rep].copy(),
            gmap.sh[rep].copy(),
        ))

    # split parents are removed; prune by activated opacity everywhere
    keep_old = ~large & (gmap.opacities() >= config.prune_opacity)
    survivors = np.flatnonzero(keep_old)
    n_pruned = int(np.sum(~keep_old & ~large))

    if new_parts:
        new_pos = np.concatenate([p[0] for p in new_parts])
        new_rot = np.concatenate([p[1] for p in new_parts])
        new_ls = np.concatenate([p[2] for p in new_parts])
        new_op = np.concatenate([p[3] for p in new_parts])
        new_sh = np.concatenate([p[4] for p in new_parts])
        fresh = 1.0 / (1.0 + np.exp(-new_op)) >= config.prune_opacity
        new_pos, new_rot, new_ls = new_pos[fresh], new_rot[fresh], new_ls[fresh]
        new_op, new_sh = new_op[fresh], new_sh[fresh]
    else:
        new_pos = np.zeros((0, 3))
        new_rot = new_ls = new_op = new_sh = None

    gmap.keep_mask(keep_old)
    n_new = new_pos.shape[0]
    if n_new:
        gmap.insert_arrays(new_pos, new_rot, new_ls, new_op, new_sh)
    gmap.reset_grad_stats()
    return DensifyResult(
        survivors=survivors, n_new=n_new,
        n_cloned=int(clone_idx.size), n_split=int(split_idx.size),
        n_pruned=n_pruned)
