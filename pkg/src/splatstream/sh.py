"""Real spherical harmonics up to degree 3 for view-dependent splat color.

Color convention: rgb = max(0, sum_k c_k Y_k(dir) + 0.5). The +0.5 offset
and the basis signs follow the common splat PLY interchange convention.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_COEFFS = 16


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the 16 basis functions at unit directions (N, 3).

    Entries above ``num_coeffs(degree)`` are zero.
    """
    dirs = np.atleast_2d(np.asarray(dirs))
    n = dirs.shape[0]
    b = np.zeros((n, N_COEFFS), dtype=dirs.dtype)
    b[:, 0] = SH_C0
    if degree < 1:
        return b
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b[:, 1] = -SH_C1 * y
    b[:, 2] = SH_C1 * z
    b[:, 3] = -SH_C1 * x
    if degree < 2:
        return b
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[:, 4] = SH_C2[0] * xy
    b[:, 5] = SH_C2[1] * yz
    b[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    b[:, 7] = SH_C2[3] * xz
    b[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return b
    b[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    b[:, 10] = SH_C3[1] * xy * z
    b[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    b[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    b[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    b[:, 14] = SH_C3[5] * z * (xx - yy)
    b[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives of each basis function w.r.t. the direction, (N, 16, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs))
    n = dirs.shape[0]
    g = np.zeros((n, N_COEFFS, 3), dtype=dirs.dtype)
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g[:, 1, 1] = -SH_C1
    g[:, 2, 2] = SH_C1
    g[:, 3, 0] = -SH_C1
    if degree < 2:
        return g
    g[:, 4, 0] = SH_C2[0] * y
    g[:, 4, 1] = SH_C2[0] * x
    g[:, 5, 1] = SH_C2[1] * z
    g[:, 5, 2] = SH_C2[1] * y
    g[:, 6, 0] = SH_C2[2] * -2 * x
    g[:, 6, 1] = SH_C2[2] * -2 * y
    g[:, 6, 2] = SH_C2[2] * 4 * z
    g[:, 7, 0] = SH_C2[3] * z
    g[:, 7, 2] = SH_C2[3] * x
    g[:, 8, 0] = SH_C2[4] * 2 * x
    g[:, 8, 1] = SH_C2[4] * -2 * y
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[:, 9, 0] = SH_C3[0] * 6 * x * y
    g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
    g[:, 10, 0] = SH_C3[1] * y * z
    g[:, 10, 1] = SH_C3[1] * x * z
    g[:, 10, 2] = SH_C3[1] * x * y
    g[:, 11, 0] = SH_C3[2] * -2 * x * y
    g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
    g[:, 11, 2] = SH_C3[2] * 8 * y * z
    g[:, 12, 0] = SH_C3[3] * -6 * x * z
    g[:, 12, 1] = SH_C3[3] * -6 * y * z
    g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
    g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
    g[:, 13, 1] = SH_C3[4] * -2 * x * y
    g[:, 13, 2] = SH_C3[4] * 8 * x * z
    g[:, 14, 0] = SH_C3[5] * 2 * x * z
    g[:, 14, 1] = SH_C3[5] * -2 * y * z
    g[:, 14, 2] = SH_C3[5] * (xx - yy)
    g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
    g[:, 15, 1] = SH_C3[6] * -6 * x * y
    return g


def colors_from_sh(sh: np.ndarray, dirs: np.ndarray, degree: int):
    """View-dependent colors for (N, 16, 3) coefficients at (N, 3) directions.

    Returns ``(rgb, active)`` where rgb = max(0, basis @ sh + 0.5) and
    ``active`` marks channels whose pre-clamp value was positive (the
    channels that pass gradient).
    """
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh) + sh.dtype.type(0.5)
    active = raw > 0
    return np.maximum(raw, 0), active


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, degree: int = 3) -> np.ndarray:
    """Color of one splat seen from ``view_dir``.

    ``sh`` may be shaped (16, 3) or flat (48,) in coefficient-major order.
    The direction is renormalized; a degenerate direction falls back to +z.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree must be in 0..3, got {degree}")
    sh = np.asarray(sh, dtype=np.float64).reshape(N_COEFFS, 3)
    d = np.asarray(view_dir, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(d)
    d = d / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    rgb, _ = colors_from_sh(sh[None], d[None], degree)
    return rgb[0]
