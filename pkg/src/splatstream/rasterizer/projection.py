"""EWA-style perspective projection of Gaussians and its analytic backward.

Forward: world covariance R diag(exp(2s)) R^T is pushed through the
world-to-camera rotation and the perspective Jacobian J evaluated at the
splat center; the 2D covariance is dilated on the diagonal for
anti-aliasing. Backward chains screen-space gradients (color, 2D mean,
conic, opacity) to every primitive parameter, including the view-direction
dependence of the spherical-harmonic color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatstream.core import Camera, GaussianMap
from splatstream.sh import num_coeffs, sh_basis, sh_basis_grad

# Columns of the per-splat screen-space gradient rows produced by the
# blend backward kernels.
G2D_RGB = slice(0, 3)
G2D_MEAN = slice(3, 5)
G2D_CONIC = slice(5, 8)
G2D_SIGMA = 8
G2D_COLS = 9


@dataclass
class Projected2D:
    """One splat on the image plane."""

    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, after dilation
    depth: float            # camera-frame z
    primitive_index: int
    rgb: np.ndarray         # (3,) view-dependent color


@dataclass
class Projection:
    """Screen-space data for all non-culled splats, plus backward context."""

    map_index: np.ndarray   # (M,) int32 indices into the source map
    t_cam: np.ndarray       # (M, 3) camera-frame positions
    depth: np.ndarray       # (M,)
    mean2d: np.ndarray      # (M, 2)
    cov2d: np.ndarray       # (M, 3) packed symmetric (a, b, c)
    conic: np.ndarray       # (M, 3) packed inverse covariance
    radius: np.ndarray      # (M,) pixel footprint radius
    sigma: np.ndarray       # (M,) activated opacity
    rgb: np.ndarray         # (M, 3)
    rgb_active: np.ndarray  # (M, 3) bool, pre-clamp color was positive
    cov_cam: np.ndarray     # (M, 3, 3) covariance in the camera frame
    rot: np.ndarray         # (M, 3, 3) rotation from the unit quaternion
    q_hat: np.ndarray       # (M, 4) normalized quaternion
    q_norm: np.ndarray      # (M,)
    s2: np.ndarray          # (M, 3) exp(2 log_scale)
    viewdir: np.ndarray     # (M, 3) unit world-frame view direction
    view_len: np.ndarray    # (M,)
    sh: np.ndarray          # (M, 16, 3) gathered coefficients
    sh_degree: int

    def __len__(self) -> int:
        return self.map_index.shape[0]


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def project_map(gmap: GaussianMap, camera: Camera, *, dtype=np.float64,
                sh_degree: int = 3, near: float = 0.01,
                dilation: float = 0.3, alpha_min: float = 1.0 / 255.0) -> Projection:
    """Project every primitive; drop splats behind the near plane or whose
    footprint misses the image entirely.

    The footprint radius sqrt(2 ln(sigma / alpha_min) * lambda_max) covers
    exactly the region where alpha can reach ``alpha_min``, so pixels
    outside a splat's tile coverage are pixels the blend would skip anyway;
    splats whose opacity cannot reach ``alpha_min`` anywhere are culled.
    """
    dt = np.dtype(dtype)
    n = len(gmap)
    W = gmap.positions.astype(dt) @ camera.R.T.astype(dt) + camera.t.astype(dt)
    depth = W[:, 2]
    keep = depth > dt.type(near)
    idx = np.flatnonzero(keep).astype(np.int32)

    t_cam = W[idx]
    tz = t_cam[:, 2]
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    mean2d = np.stack(
        [fx * t_cam[:, 0] / tz + dt.type(camera.cx),
         fy * t_cam[:, 1] / tz + dt.type(camera.cy)], axis=1)

    q = gmap.rotations[idx].astype(dt)
    q_norm = np.linalg.norm(q, axis=1)
    if np.any(q_norm == 0):
        bad = int(idx[np.flatnonzero(q_norm == 0)[0]])
        raise ValueError(f"zero-norm quaternion at primitive {bad}")
    q_hat = q / q_norm[:, None]
    rot = _rotation_from_unit_quat(q_hat)
    s2 = np.exp(2.0 * gmap.log_scales[idx].astype(dt))
    cov3 = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    Rcw = camera.R.astype(dt)
    cov_cam = np.einsum("ij,njk,lk->nil", Rcw, cov3, Rcw)

    # perspective Jacobian rows at the splat center
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    J = np.zeros((idx.size, 2, 3), dtype=dt)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * t_cam[:, 0] * inv_z2
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * t_cam[:, 1] * inv_z2
    c2 = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    a = c2[:, 0, 0] + dt.type(dilation)
    b = c2[:, 0, 1]
    c = c2[:, 1, 1] + dt.type(dilation)

    det = a * c - b * b
    mid = (a + c) / 2
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0))
    sigma = _sigmoid(gmap.opacity_logits[idx].astype(dt)).astype(dt)
    with np.errstate(divide="ignore"):
        m_cut = 2.0 * (np.log(sigma) - np.log(dt.type(alpha_min)))
    radius = np.ceil(np.sqrt(np.maximum(m_cut, 0) * lam_max))

    vis = (
        (det > 0)
        & (m_cut > 0)
        & (mean2d[:, 0] + radius >= 0)
        & (mean2d[:, 0] - radius <= camera.width - 1)
        & (mean2d[:, 1] + radius >= 0)
        & (mean2d[:, 1] - radius <= camera.height - 1)
    )
    v = np.flatnonzero(vis)
    idx, t_cam, mean2d, sigma = idx[v], t_cam[v], mean2d[v], sigma[v]
    a, b, c, det, radius = a[v], b[v], c[v], det[v], radius[v]
    rot, q_hat, q_norm, s2, cov_cam = rot[v], q_hat[v], q_norm[v], s2[v], cov_cam[v]

    conic = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)

    u = gmap.positions[idx].astype(dt) - camera.center.astype(dt)
    view_len = np.linalg.norm(u, axis=1)
    view_len = np.maximum(view_len, dt.type(1e-12))
    viewdir = u / view_len[:, None]
    sh = gmap.sh[idx].astype(dt)
    basis = sh_basis(viewdir, sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, sh) + dt.type(0.5)
    rgb_active = raw > 0
    rgb = np.maximum(raw, 0)

    return Projection(
        map_index=idx, t_cam=t_cam, depth=t_cam[:, 2], mean2d=mean2d,
        cov2d=cov2d, conic=conic, radius=radius, sigma=sigma, rgb=rgb,
        rgb_active=rgb_active, cov_cam=cov_cam, rot=rot, q_hat=q_hat,
        q_norm=q_norm, s2=s2, viewdir=viewdir, view_len=view_len, sh=sh,
        sh_degree=sh_degree,
    )


def _rotation_from_unit_quat(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def project_gaussian(primitive, camera: Camera, *, sh_degree: int = 3,
                     near: float = 0.01, dilation: float = 0.3,
                     alpha_min: float = 1.0 / 255.0):
    """Project a single primitive; returns ``Projected2D`` or None if culled."""
    gmap = GaussianMap.from_primitives([primitive])
    proj = project_map(gmap, camera, sh_degree=sh_degree, near=near,
                       dilation=dilation, alpha_min=alpha_min)
    if len(proj) == 0:
        return None
    a, b, c = proj.cov2d[0]
    return Projected2D(
        mean2d=proj.mean2d[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(proj.depth[0]),
        primitive_index=0,
        rgb=proj.rgb[0],
    )


def chain_backward(proj: Projection, camera: Camera, g2d: np.ndarray, n_primitives: int):
    """Chain per-splat screen-space gradient rows to primitive parameters.

    ``g2d`` has one row per projected splat, columns [rgb(3), mean2d(2),
    conic(3), opacity]. Returns dense gradient arrays over the full map
    (culled primitives receive zeros) plus the per-splat 2D positional
    gradient norms used by densification.
    """
    dt = g2d.dtype
    m = len(proj)
    fx, fy = dt.type(camera.fx), dt.type(camera.fy)
    Rcw = camera.R.astype(dt)

    g_rgb = g2d[:, G2D_RGB] * proj.rgb_active
    g_mean = g2d[:, G2D_MEAN]
    g_sigma = g2d[:, G2D_SIGMA]

    # opacity logit through the logistic activation
    g_logit_m = g_sigma * proj.sigma * (1.0 - proj.sigma)

    # conic -> cov2d: conic = cov2d^-1
    GQ = np.empty((m, 2, 2), dtype=dt)
    GQ[:, 0, 0] = g2d[:, 5]
    GQ[:, 0, 1] = GQ[:, 1, 0] = g2d[:, 6] / 2
    GQ[:, 1, 1] = g2d[:, 7]
    Q = np.empty((m, 2, 2), dtype=dt)
    Q[:, 0, 0] = proj.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = proj.conic[:, 1]
    Q[:, 1, 1] = proj.conic[:, 2]
    GC = -np.einsum("nij,njk,nkl->nil", Q, GQ, Q)

    # cov2d = J cov_cam J^T + dilation*I
    tz = proj.t_cam[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    J = np.zeros((m, 2, 3), dtype=dt)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * proj.t_cam[:, 0] * inv_z2
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * proj.t_cam[:, 1] * inv_z2
    dSc = np.einsum("nji,njk,nkl->nil", J, GC, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", GC, J, proj.cov_cam)

    # camera-frame covariance -> world covariance -> (log_scale, quaternion)
    dS3 = np.einsum("ji,njk,kl->nil", Rcw, dSc, Rcw)
    RtSR = np.einsum("nji,njk,nkl->nil", proj.rot, dS3, proj.rot)
    g_s2 = np.stack([RtSR[:, 0, 0], RtSR[:, 1, 1], RtSR[:, 2, 2]], axis=1)
    g_log_scale_m = 2.0 * proj.s2 * g_s2
    dR = 2.0 * np.einsum("nij,njk->nik", dS3, proj.rot * proj.s2[:, None, :])
    g_qhat = _quat_grad(dR, proj.q_hat)
    g_quat_m = (g_qhat - proj.q_hat * np.sum(proj.q_hat * g_qhat, axis=1, keepdims=True)) \
        / proj.q_norm[:, None]

    # position: through the projection of the mean and through J
    g_t = np.zeros((m, 3), dtype=dt)
    g_t[:, 0] = (fx * inv_z) * g_mean[:, 0] - dJ[:, 0, 2] * fx * inv_z2
    g_t[:, 1] = (fy * inv_z) * g_mean[:, 1] - dJ[:, 1, 2] * fy * inv_z2
    g_t[:, 2] = (
        -fx * proj.t_cam[:, 0] * inv_z2 * g_mean[:, 0]
        - fy * proj.t_cam[:, 1] * inv_z2 * g_mean[:, 1]
        - dJ[:, 0, 0] * fx * inv_z2
        - dJ[:, 1, 1] * fy * inv_z2
        + dJ[:, 0, 2] * 2 * fx * proj.t_cam[:, 0] * inv_z2 * inv_z
        + dJ[:, 1, 2] * 2 * fy * proj.t_cam[:, 1] * inv_z2 * inv_z
    )
    g_pos_m = g_t @ Rcw

    # color: SH coefficients and the view-direction dependence
    nb = num_coeffs(proj.sh_degree)
    basis = sh_basis(proj.viewdir, proj.sh_degree)
    g_sh_m = np.zeros((m, 16, 3), dtype=dt)
    g_sh_m[:, :nb, :] = basis[:, :nb, None] * g_rgb[:, None, :]
    coef = np.einsum("nkc,nc->nk", proj.sh[:, :nb], g_rgb)
    dbasis = sh_basis_grad(proj.viewdir, proj.sh_degree)
    g_dir = np.einsum("nk,nkd->nd", coef, dbasis[:, :nb])
    g_u = (g_dir - proj.viewdir * np.sum(proj.viewdir * g_dir, axis=1, keepdims=True)) \
        / proj.view_len[:, None]
    g_pos_m = g_pos_m + g_u

    # scatter into map-sized arrays
    out = {
        "position": np.zeros((n_primitives, 3), dtype=dt),
        "rotation": np.zeros((n_primitives, 4), dtype=dt),
        "log_scale": np.zeros((n_primitives, 3), dtype=dt),
        "opacity_logit": np.zeros(n_primitives, dtype=dt),
        "sh": np.zeros((n_primitives, 16, 3), dtype=dt),
        "pos2d_grad_norm": np.zeros(n_primitives, dtype=dt),
    }
    mi = proj.map_index
    out["position"][mi] = g_pos_m
    out["rotation"][mi] = g_quat_m
    out["log_scale"][mi] = g_log_scale_m
    out["opacity_logit"][mi] = g_logit_m
    out["sh"][mi] = g_sh_m
    # densification statistic in half-image (NDC-style) units so the
    # conventional 1e-3 trigger threshold is resolution-independent
    out["pos2d_grad_norm"][mi] = np.sqrt(
        (g_mean[:, 0] * (camera.width / 2)) ** 2
        + (g_mean[:, 1] * (camera.height / 2)) ** 2)
    return out


def _quat_grad(dR, q):
    """Contract dL/dR with dR/dq for unit quaternions (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty_like(q)
    g[:, 0] = 2 * (
        -dR[:, 0, 1] * z + dR[:, 0, 2] * y + dR[:, 1, 0] * z
        - dR[:, 1, 2] * x - dR[:, 2, 0] * y + dR[:, 2, 1] * x
    )
    g[:, 1] = 2 * (
        dR[:, 0, 1] * y + dR[:, 0, 2] * z + dR[:, 1, 0] * y
        - 2 * dR[:, 1, 1] * x - dR[:, 1, 2] * w + dR[:, 2, 0] * z
        + dR[:, 2, 1] * w - 2 * dR[:, 2, 2] * x
    )
    g[:, 2] = 2 * (
        -2 * dR[:, 0, 0] * y + dR[:, 0, 1] * x + dR[:, 0, 2] * w
        + dR[:, 1, 0] * x + dR[:, 1, 2] * z - dR[:, 2, 0] * w
        + dR[:, 2, 1] * z - 2 * dR[:, 2, 2] * y
    )
    g[:, 3] = 2 * (
        -2 * dR[:, 0, 0] * z - dR[:, 0, 1] * w + dR[:, 0, 2] * x
        + dR[:, 1, 0] * w - 2 * dR[:, 1, 1] * z + dR[:, 1, 2] * y
        + dR[:, 2, 0] * x + dR[:, 2, 1] * y
    )
    return g
