"""Forward rendering and the two interchangeable backward passes.

Work units (tiles for the forward and pixel-wise backward, tile x bucket
for the splat-wise backward) run either sequentially in fixed order or on
a thread pool; per-unit partial gradients are always merged in tile index
order, so results are identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from splatstream.core import Camera, GaussianMap
from splatstream.rasterizer import kernels
from splatstream.rasterizer.projection import Projection, chain_backward, project_map
from splatstream.rasterizer.tiles import TileIndex, build_tile_index

G2D_COLS = 9
EAGER_CKPT_MAX_LIST = 1024

_POOLS: dict[int, ThreadPoolExecutor] = {}


def _run_units(tasks, n_workers: int):
    if n_workers <= 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    pool = _POOLS.get(n_workers)
    if pool is None:
        pool = _POOLS[n_workers] = ThreadPoolExecutor(max_workers=n_workers)
    return list(pool.map(lambda t: t(), tasks))


@dataclass
class RasterOpts:
    """Rasterization settings shared by the forward and backward passes."""

    tile_size: int = 16
    bucket_size: int = 32
    t_min: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 3
    near: float = 0.01
    dilation: float = 0.3
    dtype: type = np.float64
    with_checkpoints: bool = True
    n_workers: int = 1


@dataclass
class ParamGrads:
    """Per-primitive gradients for every optimizable parameter.

    Accumulated in float64 regardless of the render dtype (blending
    states stay in the working dtype; only gradient reduction is wide).
    """

    position: np.ndarray        # (N, 3)
    rotation: np.ndarray        # (N, 4)
    log_scale: np.ndarray       # (N, 3)
    opacity_logit: np.ndarray   # (N,)
    sh: np.ndarray              # (N, 16, 3)
    pos2d_grad_norm: np.ndarray  # (N,) screen-space positional gradient norm
    contributed: np.ndarray     # (N,) bool, splat was blended into >= 1 pixel

    def __len__(self) -> int:
        return self.position.shape[0]

    def validate_finite(self):
        for name in ("position", "rotation", "log_scale", "opacity_logit", "sh"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"non-finite gradient in {name}")
        return self


@dataclass
class RenderOutput:
    """Rendered image plus everything the backward passes need.

    ``checkpoints[i][b, p]`` archives (T, r, g, b) pixel state after the
    first ``b * bucket_size`` splats of active tile i; ``n_contrib`` is the
    per-pixel count of list positions up to and including the last blended
    splat, which both backward passes use to mirror the forward's skip and
    termination decisions.
    """

    image: np.ndarray
    acc_rgb: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    proj: Projection
    tile_index: TileIndex
    k_eff: np.ndarray
    checkpoints: list | None
    contributed: np.ndarray
    m_cut: np.ndarray
    opts: RasterOpts
    camera: Camera
    n_primitives: int


def _tile_geometry(render_or_ti, camera, tile_id, dt):
    ti = render_or_ti
    x0, y0 = ti.tile_origin(tile_id)
    tw = min(ti.tile_size, camera.width - x0)
    th = min(ti.tile_size, camera.height - y0)
    px_row = (x0 + np.arange(tw)).astype(dt)
    py_col = (y0 + np.arange(th)).astype(dt)
    return x0, y0, tw, th, px_row, py_col


def rasterize_forward(gmap: GaussianMap, camera: Camera, opts: RasterOpts | None = None) -> RenderOutput:
    """Blend the map's splats front-to-back into an image.

    Splats are composited per tile in ascending depth; per pixel, blending
    stops once transmittance falls below ``t_min`` and the remainder is
    filled with ``background * T``.
    """
    if opts is None:
        opts = RasterOpts()
    bad = gmap.first_nonfinite_index()
    if bad is not None:
        raise ValueError(f"non-finite parameter in primitive {bad}")
    dt = np.dtype(opts.dtype)
    proj = project_map(gmap, camera, dtype=dt, sh_degree=opts.sh_degree,
                       near=opts.near, dilation=opts.dilation,
                       alpha_min=opts.alpha_min)
    ti = build_tile_index(proj, camera.width, camera.height, opts.tile_size)
    H, W = camera.height, camera.width
    bg = np.ascontiguousarray(opts.background, dtype=dt).reshape(3)
    image = np.empty((H, W, 3), dtype=dt)
    image[:] = bg
    acc = np.zeros((H, W, 3), dtype=dt)
    final_t = np.ones((H, W), dtype=dt)
    n_contrib = np.zeros((H, W), dtype=np.int32)
    contributed_proj = np.zeros(max(len(proj), 1), dtype=np.uint8)[: len(proj)]

    one = dt.type(1.0)
    amin = dt.type(opts.alpha_min)
    amax = dt.type(opts.alpha_max)
    tmin = dt.type(opts.t_min)
    order = ti.pair_splat
    bucket = opts.bucket_size
    with np.errstate(divide="ignore"):
        m_cut = (2.0 * (np.log(proj.sigma) - np.log(dt.type(opts.alpha_min)))).astype(dt)

    def make_task(tile_id):
        def task():
            x0, y0, tw, th, px_row, py_col = _tile_geometry(ti, camera, tile_id, dt)
            npx = th * tw
            st = np.empty(npx, dtype=dt)
            sc = np.empty((npx, 3), dtype=dt)
            alive = np.empty(npx, dtype=np.int64)
            pix_x = np.tile(px_row, th)
            pix_y = np.repeat(py_col, tw)
            pix_i = np.repeat(y0 + np.arange(th, dtype=np.int64), tw)
            pix_j = np.tile(x0 + np.arange(tw, dtype=np.int64), th)
            start = ti.tile_range[tile_id]
            end = ti.tile_range[tile_id + 1]
            length = int(end - start)
            # short lists archive checkpoints in the same pass; long lists
            # blend first so the checkpoint buffer can be sized by the
            # contributing prefix instead of the full list
            eager = opts.with_checkpoints and length <= EAGER_CKPT_MAX_LIST
            nb_full = (length + bucket - 1) // bucket if eager else 0
            ck_full = np.empty((nb_full, npx, 4), dtype=dt)
            ke = kernels.forward_tile(
                order, start, end, proj.mean2d, proj.conic, proj.rgb, proj.sigma,
                m_cut, pix_x, pix_y, pix_i, pix_j, th, tw, x0, y0,
                one, amin, amax, tmin, bg,
                image, acc, final_t, n_contrib, contributed_proj, st, sc, alive,
                eager, bucket, ck_full)
            ck = None
            if opts.with_checkpoints:
                nb = (ke + bucket - 1) // bucket
                if eager:
                    ck = np.ascontiguousarray(ck_full[:nb])
                else:
                    ck = np.empty((nb, npx, 4), dtype=dt)
                    if nb > 0:
                        kernels.checkpoint_tile(
                            order, start, ke, proj.mean2d, proj.conic, proj.rgb,
                            proj.sigma, m_cut, px_row, py_col, th, tw, one,
                            amin, amax, tmin, bucket, ck, st, sc)
            return ke, ck
        return task

    results = _run_units([make_task(t) for t in ti.active_tiles], opts.n_workers)
    k_eff = np.array([r[0] for r in results], dtype=np.int64)
    ckpts = [r[1] for r in results] if opts.with_checkpoints else None

    contributed = np.zeros(len(gmap), dtype=bool)
    if len(proj):
        contributed[proj.map_index[contributed_proj.astype(bool)]] = True

    return RenderOutput(
        image=image, acc_rgb=acc, final_t=final_t, n_contrib=n_contrib,
        proj=proj, tile_index=ti, k_eff=k_eff, checkpoints=ckpts,
        contributed=contributed, m_cut=m_cut, opts=opts, camera=camera,
        n_primitives=len(gmap))


def _check_grad_image(render: RenderOutput, grad_image):
    if grad_image.shape != render.image.shape:
        raise ValueError(
            f"grad_image shape {grad_image.shape} does not match "
            f"rendered image shape {render.image.shape}")
    return np.ascontiguousarray(grad_image, dtype=render.image.dtype)


def _finish_backward(render: RenderOutput, g2d) -> ParamGrads:
    out = chain_backward(render.proj, render.camera, g2d, render.n_primitives)
    grads = ParamGrads(
        position=out["position"], rotation=out["rotation"],
        log_scale=out["log_scale"], opacity_logit=out["opacity_logit"],
        sh=out["sh"], pos2d_grad_norm=out["pos2d_grad_norm"],
        contributed=render.contributed.copy())
    return grads.validate_finite()


def backward_pixelwise(render: RenderOutput, grad_image: np.ndarray,
                       n_workers: int | None = None) -> ParamGrads:
    """Backward pass parallelized over pixels (tiles of pixels).

    Each pixel traverses its blended splats in reverse depth order and adds
    its per-splat contributions into the tile's shared accumulator rows;
    tile partials merge into the global accumulator in tile index order.
    """
    opts = render.opts
    dt = render.image.dtype
    grad_image = _check_grad_image(render, grad_image)
    if n_workers is None:
        n_workers = opts.n_workers
    ti = render.tile_index
    proj = render.proj
    order = ti.pair_splat
    one = dt.type(1.0)
    amin = dt.type(opts.alpha_min)
    amax = dt.type(opts.alpha_max)

    def make_task(pos, tile_id):
        def task():
            ke = int(render.k_eff[pos])
            x0, y0, tw, th, px_row, py_col = _tile_geometry(ti, render.camera, tile_id, dt)
            partial = np.zeros((ke, G2D_COLS), dtype=np.float64)
            stash_a = np.empty(ke, dtype=np.float64)
            stash_t = np.empty(ke, dtype=dt)
            stash_c = np.empty((ke, 3), dtype=dt)
            kernels.backward_pixel_tile(
                order, ti.tile_range[tile_id], proj.mean2d, proj.conic,
                proj.rgb, proj.sigma, render.m_cut, px_row, py_col, th, tw, x0, y0,
                one, amin, amax, grad_image, render.image,
                render.n_contrib, partial, stash_a, stash_t, stash_c)
            return partial
        return task

    tasks = [make_task(pos, t) for pos, t in enumerate(ti.active_tiles)]
    partials = _run_units(tasks, n_workers)

    g2d = np.zeros((len(proj), G2D_COLS), dtype=np.float64)
    for pos, tile_id in enumerate(ti.active_tiles):
        start = ti.tile_range[tile_id]
        ke = int(render.k_eff[pos])
        rows = order[start:start + ke]
        g2d[rows] += partials[pos]
    return _finish_backward(render, g2d)


def backward_splatwise(render: RenderOutput, grad_image: np.ndarray,
                       n_workers: int | None = None) -> ParamGrads:
    """Backward pass parallelized over buckets of splats.

    Each (tile, bucket) work unit replays pixel states forward from the
    bucket's checkpoint and accumulates its splats' gradients privately,
    eliminating shared-accumulator contention; the per-tile rows then merge
    exactly like the pixel-wise pass. With the same worker count and merge
    order the result matches :func:`backward_pixelwise` to rounding.
    """
    if render.checkpoints is None:
        raise RuntimeError(
            "render output has no checkpoints; re-run rasterize_forward "
            "with with_checkpoints=True to use the splat-wise backward")
    opts = render.opts
    dt = render.image.dtype
    grad_image = _check_grad_image(render, grad_image)
    if n_workers is None:
        n_workers = opts.n_workers
    ti = render.tile_index
    proj = render.proj
    order = ti.pair_splat
    bucket = opts.bucket_size
    one = dt.type(1.0)
    amin = dt.type(opts.alpha_min)
    amax = dt.type(opts.alpha_max)

    tile_partials = []
    tasks = []
    for pos, tile_id in enumerate(ti.active_tiles):
        ke = int(render.k_eff[pos])
        partial = np.zeros((ke, G2D_COLS), dtype=np.float64)
        tile_partials.append(partial)
        nb = (ke + bucket - 1) // bucket
        if nb == 0:
            continue

        def make_task(pos=pos, tile_id=tile_id, partial=partial, ke=ke, nb=nb):
            def task():
                x0, y0, tw, th, px_row, py_col = _tile_geometry(ti, render.camera, tile_id, dt)
                npx = th * tw
                st = np.empty(npx, dtype=dt)
                sc = np.empty((npx, 3), dtype=dt)
                kernels.backward_splat_tile(
                    order, ti.tile_range[tile_id], ke, bucket, proj.mean2d,
                    proj.conic, proj.rgb, proj.sigma, render.m_cut, px_row,
                    py_col, th, tw,
                    x0, y0, one, amin, amax, grad_image, render.image,
                    render.n_contrib, render.checkpoints[pos], partial,
                    st, sc, 0, nb)
            return task

        tasks.append(make_task())

    _run_units(tasks, n_workers)

    g2d = np.zeros((len(proj), G2D_COLS), dtype=np.float64)
    for pos, tile_id in enumerate(ti.active_tiles):
        start = ti.tile_range[tile_id]
        ke = int(render.k_eff[pos])
        rows = order[start:start + ke]
        g2d[rows] += tile_partials[pos]
    return _finish_backward(render, g2d)


def replay_pixel_states(render: RenderOutput, tile_pos: int, from_bucket: int,
                        n_positions: int | None = None):
    """Advance archived pixel states forward from a checkpoint.

    Returns ``(T, rgb)`` arrays over the tile's pixels after blending
    ``n_positions`` further list positions (default: to the end of the
    processed prefix). Used to verify that checkpoints reproduce the
    forward recurrence exactly.
    """
    if render.checkpoints is None:
        raise RuntimeError("render output has no checkpoints")
    opts = render.opts
    dt = render.image.dtype
    ti = render.tile_index
    tile_id = int(ti.active_tiles[tile_pos])
    ke = int(render.k_eff[tile_pos])
    x0, y0, tw, th, px_row, py_col = _tile_geometry(ti, render.camera, tile_id, dt)
    ck = render.checkpoints[tile_pos][from_bucket]
    state_t = ck[:, 0].copy()
    state_c = np.ascontiguousarray(ck[:, 1:4]).copy()
    pos_from = from_bucket * opts.bucket_size
    pos_to = ke if n_positions is None else min(ke, pos_from + n_positions)
    kernels.replay_tile(
        ti.pair_splat, ti.tile_range[tile_id], pos_from, pos_to,
        render.proj.mean2d, render.proj.conic, render.proj.rgb,
        render.proj.sigma, render.m_cut, px_row, py_col, th, tw,
        dt.type(1.0), dt.type(opts.alpha_min), dt.type(opts.alpha_max),
        dt.type(opts.t_min), state_t, state_c)
    return state_t, state_c
