"""Core scene types: Gaussian primitives, the map container, and cameras.

Parameters are stored pre-activation (opacity as a logit, scale in log
space) for optimization stability; activations are applied on read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SH_COEFFS = 16  # degree-3 real spherical harmonics, per channel


def logistic(x):
    """Numerically stable sigmoid, maps logits to opacity in (0, 1)."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    """Inverse of :func:`logistic`."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (..., 4) in (w, x, y, z) order to rotation matrices.

    Quaternions are normalized first; a zero-norm quaternion is invalid.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        bad = int(np.flatnonzero(norm == 0.0)[0])
        raise ValueError(f"zero-norm quaternion at index {bad}")
    q = q / norm[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 world covariance from a quaternion and per-axis log std-devs.

    Sigma = R diag(exp(2 s)) R^T; symmetric positive semi-definite with
    eigenvalues exp(2 s) and determinant exp(2 sum(s))^2.
    """
    R = quat_to_rotation(np.asarray(rotation, dtype=np.float64))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (R * s2[None, :]) @ R.T


def build_covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched :func:`build_covariance` over (N, 4) and (N, 3) arrays."""
    R = quat_to_rotation(rotations)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


@dataclass
class GaussianPrimitive:
    """One splat: position, orientation, log-scales, opacity logit, SH color.

    ``sh`` holds 16 degree-3 spherical-harmonic coefficients per color
    channel, shape (16, 3); the flat 48-vector view is the row-major
    flattening (coefficient-major).
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(SH_COEFFS, 3)

    @property
    def opacity(self) -> float:
        return float(logistic(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


class GaussianMap:
    """Growable store of Gaussian primitives plus densification statistics.

    Parameters live in structure-of-arrays form (float64). Per-primitive
    gradient statistics (accumulated 2D positional gradient norm, mean 3D
    position gradient, observation count) stay index-aligned with the
    primitives; indices are stable between densification events. Exactly
    one writer mutates the map at a time; rasterization passes read it.
    """

    def __init__(self):
        self.positions = np.zeros((0, 3), dtype=np.float64)
        self.rotations = np.zeros((0, 4), dtype=np.float64)
        self.log_scales = np.zeros((0, 3), dtype=np.float64)
        self.opacity_logits = np.zeros(0, dtype=np.float64)
        self.sh = np.zeros((0, SH_COEFFS, 3), dtype=np.float64)
        self.grad2d_accum = np.zeros(0, dtype=np.float64)
        self.grad3d_accum = np.zeros((0, 3), dtype=np.float64)
        self.obs_count = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, index: int) -> GaussianPrimitive:
        index = int(index)
        return GaussianPrimitive(
            position=self.positions[index].copy(),
            rotation=self.rotations[index].copy(),
            log_scale=self.log_scales[index].copy(),
            opacity_logit=float(self.opacity_logits[index]),
            sh=self.sh[index].copy(),
        )

    @classmethod
    def from_primitives(cls, primitives) -> "GaussianMap":
        gmap = cls()
        gmap.insert(primitives)
        return gmap

    @classmethod
    def from_arrays(cls, positions, rotations, log_scales, opacity_logits, sh) -> "GaussianMap":
        gmap = cls()
        gmap.insert_arrays(positions, rotations, log_scales, opacity_logits, sh)
        return gmap

    def insert(self, primitives) -> "GaussianMap":
        """Append primitives; their gradient statistics start zeroed."""
        prims = list(primitives)
        if not prims:
            return self
        return self.insert_arrays(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims], dtype=np.float64),
            np.stack([p.sh for p in prims]),
        )

    def insert_arrays(self, positions, rotations, log_scales, opacity_logits, sh) -> "GaussianMap":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        self.positions = np.concatenate([self.positions, positions])
        self.rotations = np.concatenate(
            [self.rotations, np.asarray(rotations, dtype=np.float64).reshape(n, 4)]
        )
        self.log_scales = np.concatenate(
            [self.log_scales, np.asarray(log_scales, dtype=np.float64).reshape(n, 3)]
        )
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(n)]
        )
        self.sh = np.concatenate([self.sh, np.asarray(sh, dtype=np.float64).reshape(n, SH_COEFFS, 3)])
        self.grad2d_accum = np.concatenate([self.grad2d_accum, np.zeros(n)])
        self.grad3d_accum = np.concatenate([self.grad3d_accum, np.zeros((n, 3))])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(n, dtype=np.int64)])
        return self

    def remove(self, indices) -> "GaussianMap":
        """Drop primitives at ``indices``; survivors keep their relative order."""
        indices = np.asarray(list(indices), dtype=np.int64)
        if indices.size == 0:
            return self
        if np.unique(indices).size != indices.size:
            raise ValueError("duplicate indices in remove()")
        if indices.min() < 0 or indices.max() >= len(self):
            raise ValueError(f"index out of range in remove(): {indices}")
        keep = np.ones(len(self), dtype=bool)
        keep[indices] = False
        return self.keep_mask(keep)

    def keep_mask(self, keep: np.ndarray) -> "GaussianMap":
        self.positions = self.positions[keep]
        self.rotations = self.rotations[keep]
        self.log_scales = self.log_scales[keep]
        self.opacity_logits = self.opacity_logits[keep]
        self.sh = self.sh[keep]
        self.grad2d_accum = self.grad2d_accum[keep]
        self.grad3d_accum = self.grad3d_accum[keep]
        self.obs_count = self.obs_count[keep]
        return self

    def opacities(self) -> np.ndarray:
        """Activated opacities in (0, 1)."""
        return logistic(self.opacity_logits)

    def scales(self) -> np.ndarray:
        """Activated per-axis standard deviations, > 0."""
        return np.exp(self.log_scales)

    def reset_grad_stats(self):
        n = len(self)
        self.grad2d_accum = np.zeros(n)
        self.grad3d_accum = np.zeros((n, 3))
        self.obs_count = np.zeros(n, dtype=np.int64)

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm quaternion in map")
        self.rotations /= norms

    def first_nonfinite_index(self):
        """Index of the first primitive with a non-finite parameter, or None."""
        bad = ~(
            np.isfinite(self.positions).all(axis=1)
            & np.isfinite(self.rotations).all(axis=1)
            & np.isfinite(self.log_scales).all(axis=1)
            & np.isfinite(self.opacity_logits)
            & np.isfinite(self.sh).all(axis=(1, 2))
        )
        idx = np.flatnonzero(bad)
        return int(idx[0]) if idx.size else None


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    ``R`` (3x3, orthonormal) and ``t`` map world points into the camera
    frame: x_cam = R x_world + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")
        if np.linalg.norm(self.R.T @ self.R - np.eye(3)) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    @classmethod
    def from_c2w(cls, fx, fy, cx, cy, width, height, R_c2w, t_c2w) -> "Camera":
        """Build from a camera-to-world pose (inverted to world-to-camera)."""
        R_c2w = np.asarray(R_c2w, dtype=np.float64)
        t_c2w = np.asarray(t_c2w, dtype=np.float64)
        R = R_c2w.T
        return cls(fx, fy, cx, cy, width, height, R=R, t=-R @ t_c2w)

    @classmethod
    def looking_at(cls, fx, fy, cx, cy, width, height, eye, target, up=(0.0, 1.0, 0.0)) -> "Camera":
        """Camera at ``eye`` with +z toward ``target`` (right-handed, y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-12:
            up = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, cx, cy, width, height, R=R, t=-R @ eye)
