"""Training losses and image-quality metrics with analytic gradients.

The rendered loss is (1 - w) * L1 + w * (1 - SSIM) with an 11x11 Gaussian
window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 and reflection padding; the
opacity regularizer is the mean absolute activated opacity. All functions
are pure and safe to call from parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 100.0


@lru_cache(maxsize=None)
def _window1d() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2
    x = np.arange(SSIM_WINDOW) - half
    w = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return w / w.sum()


@lru_cache(maxsize=None)
def _reflect_index(n: int) -> np.ndarray:
    """Indices implementing symmetric reflection padding by the half window."""
    pad = SSIM_WINDOW // 2
    idx = np.arange(-pad, n + pad)
    while True:  # repeated reflection handles images narrower than the window
        idx = np.abs(idx)
        over = idx >= n
        if not over.any():
            return idx
        idx[over] = 2 * n - 2 - idx[over]


def _filt_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Gaussian-filter one axis with reflection padding, output same length.

    ndimage's 'mirror' mode is the same symmetric reflection (no edge
    repeat) as :func:`_reflect_index`; the index route stays as the slow
    reference used to cross-check it and to define the adjoint.
    """
    from scipy import ndimage

    if x.shape[axis] > SSIM_WINDOW:
        return ndimage.correlate1d(x, _window1d(), axis=axis, mode="mirror")
    return _filt_axis_reference(x, axis)


def _filt_axis_reference(x: np.ndarray, axis: int) -> np.ndarray:
    w = _window1d()
    x = np.moveaxis(x, axis, 0)
    idx = _reflect_index(x.shape[0])
    xp = x[idx]
    out = np.zeros_like(x)
    for m in range(SSIM_WINDOW):
        out += w[m] * xp[m:m + x.shape[0]]
    return np.moveaxis(out, 0, axis)


def _filt_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_filt_axis`: spread then fold reflected borders back."""
    w = _window1d()
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    idx = _reflect_index(n)
    gp = np.zeros((n + SSIM_WINDOW - 1,) + g.shape[1:], dtype=g.dtype)
    for m in range(SSIM_WINDOW):
        gp[m:m + n] += w[m] * g
    out = np.zeros_like(g)
    np.add.at(out, idx, gp)
    return np.moveaxis(out, 0, axis)


def _filt(x: np.ndarray) -> np.ndarray:
    return _filt_axis(_filt_axis(x, 0), 1)


def _filt_adjoint(g: np.ndarray) -> np.ndarray:
    return _filt_axis_adjoint(_filt_axis_adjoint(g, 1), 0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _ssim_terms(x, y):
    mx = _filt(x)
    my = _filt(y)
    sxx = _filt(x * x) - mx * mx
    syy = _filt(y * y) - my * my
    sxy = _filt(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over pixels and channels, in [-1, 1]."""
    a, b = _check_pair(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def _ssim_with_grad(x, y):
    """SSIM value and its analytic gradient w.r.t. ``x``."""
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    npix = x.size
    gs = np.full_like(x, 1.0 / npix)
    ga1 = gs * a2 / (b1 * b2)
    ga2 = gs * a1 / (b1 * b2)
    gb1 = -gs * s / b1
    gb2 = -gs * s / b2
    # a1 -> mx; b1 -> mx; sxx -> (W(x^2), mx); sxy -> (W(xy), mx)
    g_mx = 2 * my * ga1 + 2 * mx * gb1 - 2 * mx * gb2 - my * 2 * ga2
    g_wx2 = gb2
    g_wxy = 2 * ga2
    gx = _filt_adjoint(g_mx) + _filt_adjoint(g_wx2) * 2 * x + _filt_adjoint(g_wxy) * y
    return float(np.mean(s)), gx


def rendered_loss(rendered: np.ndarray, target: np.ndarray,
                  lambda_ssim: float = 0.2):
    """Weighted L1 + structural-dissimilarity photometric loss.

    Returns the scalar loss and its analytic gradient w.r.t. the rendered
    image: (1 - lambda_ssim) * mean|d| + lambda_ssim * (1 - SSIM).
    """
    rendered, target = _check_pair(rendered, target)
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim != 0.0:
        ssim_val, gx = _ssim_with_grad(rendered, target)
        loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_val)
        grad = grad - lambda_ssim * gx
    else:
        loss = l1
    return loss, grad


def opacity_reg(opacities: np.ndarray):
    """Mean absolute activated opacity and its gradient w.r.t. the input.

    Empty input is defined as zero loss with zero gradients.
    """
    opacities = np.asarray(opacities, dtype=np.float64)
    n = opacities.size
    if n == 0:
        return 0.0, np.zeros(0)
    value = float(np.mean(np.abs(opacities)))
    grads = np.sign(opacities) / n
    return value, grads


def total_loss(rendered: float, opacity: float, lambda_o: float) -> float:
    """Weighted sum of the photometric term and the opacity regularizer."""
    return rendered + lambda_o * opacity


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


@dataclass
class LossBreakdown:
    """All loss terms of one training iteration plus their gradients."""

    l1: float
    ssim_loss: float
    rendered: float
    opacity_reg: float
    total: float
    grad_image: np.ndarray
    grad_opacity_logit: np.ndarray


def compute_losses(rendered: np.ndarray, target: np.ndarray,
                   opacity_logits: np.ndarray, lambda_ssim: float = 0.2,
                   lambda_o: float = 0.001) -> LossBreakdown:
    """Full training loss: photometric term plus opacity regularization.

    ``grad_image`` is the derivative of the total w.r.t. the rendered
    image; ``grad_opacity_logit`` carries the regularizer's contribution
    chained through the logistic activation (the photometric path reaches
    opacities through the rasterizer backward instead).
    """
    rendered, target = _check_pair(rendered, target)
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim != 0.0:
        ssim_val, gx = _ssim_with_grad(rendered, target)
        ssim_loss = 1.0 - ssim_val
        grad = grad - lambda_ssim * gx
    else:
        ssim_loss = 0.0
    rendered_val = (1.0 - lambda_ssim) * l1 + lambda_ssim * ssim_loss

    logits = np.asarray(opacity_logits, dtype=np.float64)
    sigmas = 1.0 / (1.0 + np.exp(-logits)) if logits.size else np.zeros(0)
    reg, reg_grad_sigma = opacity_reg(sigmas)
    grad_logit = lambda_o * reg_grad_sigma * sigmas * (1.0 - sigmas)

    return LossBreakdown(
        l1=l1, ssim_loss=ssim_loss, rendered=rendered_val, opacity_reg=reg,
        total=total_loss(rendered_val, reg, lambda_o),
        grad_image=grad, grad_opacity_logit=grad_logit)
