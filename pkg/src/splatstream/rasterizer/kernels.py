"""Numba work-unit kernels for tile-based blending and both backward modes.

All kernels release the GIL so tile / bucket work units can run on a
thread pool. Scratch buffers are allocated by the caller in the working
dtype; threshold scalars arrive as numpy scalars of the same dtype so the
arithmetic (and therefore every skip / termination decision) is identical
across the forward pass, the checkpoint replay, and both backward modes.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _alpha(mean2d, conic, sigma, s, px, py, alpha_min, alpha_max, m_cut):
    """Opacity-weighted Gaussian falloff at one pixel; < 0 means skip.

    ``m_cut[s] = 2 ln(sigma_s / alpha_min)`` skips the exponential in the
    footprint tail where the alpha floor rejects the pair anyway.
    """
    dx = px - mean2d[s, 0]
    dy = py - mean2d[s, 1]
    m = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
    if m > m_cut[s]:
        return -1.0
    a = sigma[s] * np.exp(-0.5 * m)
    if a < alpha_min:
        return -1.0
    if a > alpha_max:
        a = alpha_max
    return a


@njit(cache=True, nogil=True)
def forward_tile(order, start, end, mean2d, conic, rgb, sigma, m_cut,
                 pix_x, pix_y, pix_i, pix_j, th, tw, x0, y0,
                 one, alpha_min, alpha_max, t_min, bg,
                 image, acc, final_t, n_contrib, contributed,
                 state_t, state_c, alive, write_ckpt, bucket, ckpt):
    """Front-to-back blend of one tile's depth-sorted splat list.

    Terminated pixels are swap-removed from the ``alive`` worklist (pixel
    states are independent, so visit order does not affect any value).
    With ``write_ckpt`` the pixel states are archived into ``ckpt`` at
    every bucket boundary during the same pass. Writes the tile's pixels
    of the full-image outputs and returns the largest per-pixel
    contributing-prefix length, which bounds both backward passes and the
    checkpoint range.
    """
    npx = th * tw
    for p in range(npx):
        state_t[p] = one
        state_c[p, 0] = 0.0
        state_c[p, 1] = 0.0
        state_c[p, 2] = 0.0
        alive[p] = p
    n_alive = npx
    max_contrib = 0
    for k in range(start, end):
        q = k - start
        if write_ckpt and q % bucket == 0:
            b = q // bucket
            for p in range(npx):
                ckpt[b, p, 0] = state_t[p]
                ckpt[b, p, 1] = state_c[p, 0]
                ckpt[b, p, 2] = state_c[p, 1]
                ckpt[b, p, 3] = state_c[p, 2]
        s = order[k]
        blended = False
        ii = 0
        while ii < n_alive:
            p = alive[ii]
            a = _alpha(mean2d, conic, sigma, s, pix_x[p], pix_y[p],
                       alpha_min, alpha_max, m_cut)
            if a < 0.0:
                ii += 1
                continue
            T = state_t[p]
            w = a * T
            state_c[p, 0] += rgb[s, 0] * w
            state_c[p, 1] += rgb[s, 1] * w
            state_c[p, 2] += rgb[s, 2] * w
            Tn = T * (one - a)
            state_t[p] = Tn
            n_contrib[pix_i[p], pix_j[p]] = np.int32(q + 1)
            if q + 1 > max_contrib:
                max_contrib = q + 1
            blended = True
            if Tn < t_min:
                n_alive -= 1
                alive[ii] = alive[n_alive]
            else:
                ii += 1
        if blended:
            contributed[s] = 1
        if n_alive == 0:
            break
    for i in range(th):
        for j in range(tw):
            p = i * tw + j
            T = state_t[p]
            final_t[y0 + i, x0 + j] = T
            acc[y0 + i, x0 + j, 0] = state_c[p, 0]
            acc[y0 + i, x0 + j, 1] = state_c[p, 1]
            acc[y0 + i, x0 + j, 2] = state_c[p, 2]
            image[y0 + i, x0 + j, 0] = state_c[p, 0] + bg[0] * T
            image[y0 + i, x0 + j, 1] = state_c[p, 1] + bg[1] * T
            image[y0 + i, x0 + j, 2] = state_c[p, 2] + bg[2] * T
    return max_contrib


@njit(cache=True, nogil=True)
def checkpoint_tile(order, start, k_eff, mean2d, conic, rgb, sigma, m_cut,
                    px_row, py_col, th, tw,
                    one, alpha_min, alpha_max, t_min, bucket,
                    ckpt, state_t, state_c):
    """Replay the blend, archiving pixel states at every bucket boundary.

    ``ckpt[b, p] = (T, r, g, b)`` is the state after the first b*bucket
    splats, bitwise identical to the forward recurrence.
    """
    npx = th * tw
    for p in range(npx):
        state_t[p] = one
        state_c[p, 0] = 0.0
        state_c[p, 1] = 0.0
        state_c[p, 2] = 0.0
    for k in range(k_eff):
        if k % bucket == 0:
            b = k // bucket
            for p in range(npx):
                ckpt[b, p, 0] = state_t[p]
                ckpt[b, p, 1] = state_c[p, 0]
                ckpt[b, p, 2] = state_c[p, 1]
                ckpt[b, p, 3] = state_c[p, 2]
        s = order[start + k]
        for i in range(th):
            py = py_col[i]
            for j in range(tw):
                p = i * tw + j
                T = state_t[p]
                if T < t_min:
                    continue
                a = _alpha(mean2d, conic, sigma, s, px_row[j], py,
                           alpha_min, alpha_max, m_cut)
                if a < 0.0:
                    continue
                w = a * T
                state_c[p, 0] += rgb[s, 0] * w
                state_c[p, 1] += rgb[s, 1] * w
                state_c[p, 2] += rgb[s, 2] * w
                state_t[p] = T * (one - a)


@njit(cache=True, nogil=True)
def replay_tile(order, start, pos_from, pos_to, mean2d, conic, rgb, sigma,
                m_cut, px_row, py_col, th, tw,
                one, alpha_min, alpha_max, t_min,
                state_t, state_c):
    """Advance archived pixel states from list position pos_from to pos_to."""
    for k in range(pos_from, pos_to):
        s = order[start + k]
        for i in range(th):
            py = py_col[i]
            for j in range(tw):
                p = i * tw + j
                T = state_t[p]
                if T < t_min:
                    continue
                a = _alpha(mean2d, conic, sigma, s, px_row[j], py,
                           alpha_min, alpha_max, m_cut)
                if a < 0.0:
                    continue
                w = a * T
                state_c[p, 0] += rgb[s, 0] * w
                state_c[p, 1] += rgb[s, 1] * w
                state_c[p, 2] += rgb[s, 2] * w
                state_t[p] = T * (one - a)


@njit(cache=True, nogil=True)
def backward_pixel_tile(order, start, mean2d, conic, rgb, sigma, m_cut,
                        px_row, py_col, th, tw, x0, y0,
                        one, alpha_min, alpha_max,
                        grad_image, image, n_contrib,
                        partial, stash_a, stash_t, stash_c):
    """Pixel-parallel backward: each pixel re-runs its forward prefix
    (stashing alpha, transmittance, and accumulated color per splat), then
    traverses its blended splats in reverse depth order, adding per-splat
    contributions into the shared tile accumulator rows.

    The prefix recurrence rounds through the working-dtype stash exactly
    like the forward's state arrays, and the gradient terms match the
    splat-wise kernel's expressions, so per-(pixel, splat) contributions
    of the two modes are bitwise identical; only the accumulation pattern
    differs. ``partial`` is float64.
    """
    for i in range(th):
        py = py_col[i]
        for j in range(tw):
            nj = n_contrib[y0 + i, x0 + j]
            if nj == 0:
                continue
            g0 = grad_image[y0 + i, x0 + j, 0]
            g1 = grad_image[y0 + i, x0 + j, 1]
            g2 = grad_image[y0 + i, x0 + j, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            px = px_row[j]
            # forward prefix: recompute per-splat alpha, prior transmittance,
            # and accumulated color after blending; every recurrence value
            # round-trips through the working-dtype stash so it matches the
            # forward state arrays bitwise
            T = one
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for k in range(nj):
                s = order[start + k]
                a = _alpha(mean2d, conic, sigma, s, px, py,
                           alpha_min, alpha_max, m_cut)
                if a < 0.0:
                    stash_a[k] = 0.0
                else:
                    stash_a[k] = a
                    stash_t[k] = T
                    w = a * stash_t[k]
                    stash_c[k, 0] = c0 + rgb[s, 0] * w
                    stash_c[k, 1] = c1 + rgb[s, 1] * w
                    stash_c[k, 2] = c2 + rgb[s, 2] * w
                    c0 = stash_c[k, 0]
                    c1 = stash_c[k, 1]
                    c2 = stash_c[k, 2]
                    T = stash_t[k] * (one - a)
            # reverse traversal over blended splats
            for k in range(nj - 1, -1, -1):
                a = stash_a[k]
                if a == 0.0:
                    continue
                s = order[start + k]
                Tk = stash_t[k]
                w = a * Tk
                partial[k, 0] += w * g0
                partial[k, 1] += w * g1
                partial[k, 2] += w * g2
                am1 = one - a
                if am1 > 0.0 and a != alpha_max:
                    # suffix color behind this splat, background included
                    s0 = image[y0 + i, x0 + j, 0] - stash_c[k, 0]
                    s1 = image[y0 + i, x0 + j, 1] - stash_c[k, 1]
                    s2c = image[y0 + i, x0 + j, 2] - stash_c[k, 2]
                    dalpha = (
                        (rgb[s, 0] * Tk - s0 / am1) * g0
                        + (rgb[s, 1] * Tk - s1 / am1) * g1
                        + (rgb[s, 2] * Tk - s2c / am1) * g2
                    )
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    partial[k, 8] += dalpha * (a / sigma[s])
                    qdx = conic[s, 0] * dx + conic[s, 1] * dy
                    qdy = conic[s, 1] * dx + conic[s, 2] * dy
                    da = dalpha * a
                    partial[k, 3] += da * qdx
                    partial[k, 4] += da * qdy
                    h = -0.5 * da
                    partial[k, 5] += h * dx * dx
                    partial[k, 6] += h * 2.0 * dx * dy
                    partial[k, 7] += h * dy * dy


@njit(cache=True, nogil=True)
def backward_splat_tile(order, start, k_eff, bucket, mean2d, conic, rgb, sigma,
                        m_cut, px_row, py_col, th, tw, x0, y0,
                        one, alpha_min, alpha_max,
                        grad_image, image, n_contrib,
                        ckpt, partial, state_t, state_c, b_from, b_to):
    """Splat-parallel backward for buckets [b_from, b_to) of one tile.

    Each bucket work unit reconstructs intermediate pixel states by
    replaying forward from its checkpoint; each splat then accumulates its
    own gradient privately over the tile's pixels (no shared-accumulator
    contention) and writes one row of the tile partial. Per-(pixel, splat)
    terms are computed exactly like the pixel-wise kernel's; ``partial``
    is float64.
    """
    npx = th * tw
    for b in range(b_from, b_to):
        for p in range(npx):
            state_t[p] = ckpt[b, p, 0]
            state_c[p, 0] = ckpt[b, p, 1]
            state_c[p, 1] = ckpt[b, p, 2]
            state_c[p, 2] = ckpt[b, p, 3]
        b_lo = b * bucket
        b_hi = min(k_eff, b_lo + bucket)
        _splat_bucket_inner(order, start, b_lo, b_hi, mean2d, conic, rgb,
                            sigma, m_cut, px_row, py_col, th, tw, x0, y0, one,
                            alpha_min, alpha_max, grad_image, image,
                            n_contrib, partial, state_t, state_c)


@njit(cache=True, nogil=True, inline="always")
def _splat_bucket_inner(order, start, b_lo, b_hi, mean2d, conic, rgb, sigma,
                        m_cut, px_row, py_col, th, tw, x0, y0,
                        one, alpha_min, alpha_max,
                        grad_image, image, n_contrib,
                        partial, state_t, state_c):
    for k in range(b_lo, b_hi):
        s = order[start + k]
        acc0 = partial[k, 0]
        acc1 = partial[k, 1]
        acc2 = partial[k, 2]
        acc3 = partial[k, 3]
        acc4 = partial[k, 4]
        acc5 = partial[k, 5]
        acc6 = partial[k, 6]
        acc7 = partial[k, 7]
        acc8 = partial[k, 8]
        for i in range(th):
            py = py_col[i]
            for j in range(tw):
                p = i * tw + j
                if k >= n_contrib[y0 + i, x0 + j]:
                    continue
                a = _alpha(mean2d, conic, sigma, s, px_row[j], py,
                           alpha_min, alpha_max, m_cut)
                if a < 0.0:
                    continue
                T = state_t[p]
                w = a * T
                state_c[p, 0] = state_c[p, 0] + rgb[s, 0] * w
                state_c[p, 1] = state_c[p, 1] + rgb[s, 1] * w
                state_c[p, 2] = state_c[p, 2] + rgb[s, 2] * w
                state_t[p] = T * (one - a)
                g0 = grad_image[y0 + i, x0 + j, 0]
                g1 = grad_image[y0 + i, x0 + j, 1]
                g2 = grad_image[y0 + i, x0 + j, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                acc0 += w * g0
                acc1 += w * g1
                acc2 += w * g2
                am1 = one - a
                if am1 > 0.0 and a != alpha_max:
                    # suffix color behind this splat, background included
                    s0 = image[y0 + i, x0 + j, 0] - state_c[p, 0]
                    s1 = image[y0 + i, x0 + j, 1] - state_c[p, 1]
                    s2c = image[y0 + i, x0 + j, 2] - state_c[p, 2]
                    dalpha = (
                        (rgb[s, 0] * T - s0 / am1) * g0
                        + (rgb[s, 1] * T - s1 / am1) * g1
                        + (rgb[s, 2] * T - s2c / am1) * g2
                    )
                    dx = px_row[j] - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    acc8 += dalpha * (a / sigma[s])
                    qdx = conic[s, 0] * dx + conic[s, 1] * dy
                    qdy = conic[s, 1] * dx + conic[s, 2] * dy
                    da = dalpha * a
                    acc3 += da * qdx
                    acc4 += da * qdy
                    h = -0.5 * da
                    acc5 += h * dx * dx
                    acc6 += h * 2.0 * dx * dy
                    acc7 += h * dy * dy
        partial[k, 0] = acc0
        partial[k, 1] = acc1
        partial[k, 2] = acc2
        partial[k, 3] = acc3
        partial[k, 4] = acc4
        partial[k, 5] = acc5
        partial[k, 6] = acc6
        partial[k, 7] = acc7
        partial[k, 8] = acc8
