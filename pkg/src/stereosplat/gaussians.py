"""3D Gaussian primitives: covariance factorization and spherical-harmonic color.

A primitive stores its covariance in unconstrained form (log-scales plus an
unnormalized quaternion) so optimizers can move freely; the realized
covariance ``R diag(exp(s))^2 R^T`` is positive semi-definite for any finite
raw values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, Ray

# Real spherical-harmonic basis constants (degrees 0..2).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

_QUAT_NORM_FLOOR = 1e-12


class GaussianError(ValueError):
    """Invalid Gaussian primitive parameters."""


def sh_coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree(coefficient_count: int) -> int:
    degree = int(round(np.sqrt(coefficient_count))) - 1
    if degree < 0 or degree > 2 or (degree + 1) ** 2 != coefficient_count:
        raise GaussianError(f"sh must have 1, 4, or 9 coefficient rows, got {coefficient_count}")
    return degree


@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat: mean, raw covariance factors, opacity, SH color coefficients.

    Fields
    ------
    mean : (3,) world-space center.
    scale_raw : (3,) log-scales; realized axis scales are ``exp(scale_raw)``.
    rotation_raw : (4,) unnormalized quaternion ``(w, x, y, z)``.
    opacity : scalar in [0, 1].
    sh : (K, 3) spherical-harmonic coefficients per color channel,
        K in {1, 4, 9} for degrees 0..2.
    """

    mean: np.ndarray
    scale_raw: np.ndarray
    rotation_raw: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        scale_raw = np.asarray(self.scale_raw, dtype=np.float64)
        rotation_raw = np.asarray(self.rotation_raw, dtype=np.float64)
        sh = np.asarray(self.sh, dtype=np.float64)
        if mean.shape != (3,):
            raise GaussianError(f"mean must have shape (3,), got {mean.shape}")
        if scale_raw.shape != (3,):
            raise GaussianError(f"scale_raw must have shape (3,), got {scale_raw.shape}")
        if rotation_raw.shape != (4,):
            raise GaussianError(f"rotation_raw must have shape (4,), got {rotation_raw.shape}")
        if np.linalg.norm(rotation_raw) < _QUAT_NORM_FLOOR:
            raise GaussianError("rotation_raw has (near-)zero norm")
        if not (0.0 <= self.opacity <= 1.0):
            raise GaussianError(f"opacity must lie in [0, 1], got {self.opacity}")
        if sh.ndim != 2 or sh.shape[1] != 3:
            raise GaussianError(f"sh must have shape (K, 3), got {sh.shape}")
        sh_degree(sh.shape[0])
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale_raw", scale_raw)
        object.__setattr__(self, "rotation_raw", rotation_raw)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "sh", sh)

    @property
    def degree(self) -> int:
        return sh_degree(self.sh.shape[0])


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix of an unnormalized quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < _QUAT_NORM_FLOOR:
        raise GaussianError("quaternion has (near-)zero norm")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def build_covariance(scale_raw, rotation_raw) -> np.ndarray:
    """Realize ``Sigma = R diag(exp(scale_raw))^2 R^T``.

    Positive semi-definite by construction with eigenvalues
    ``exp(2 * scale_raw)``.
    """
    s = np.exp(np.asarray(scale_raw, dtype=np.float64))
    R = quaternion_to_rotation(rotation_raw)
    M = R * s[None, :]
    return M @ M.T


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values at unit direction(s), shape (..., (degree+1)^2)."""
    v = np.asarray(view_dir, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    cols = [np.broadcast_to(SH_C0, x.shape)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_gradient(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction), shape (..., (degree+1)^2, 3)."""
    v = np.asarray(view_dir, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [
            np.stack([zero, -SH_C1 * one, zero], axis=-1),
            np.stack([zero, zero, SH_C1 * one], axis=-1),
            np.stack([-SH_C1 * one, zero, zero], axis=-1),
        ]
    if degree >= 2:
        rows += [
            np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], axis=-1),
            np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], axis=-1),
            np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], axis=-1),
            np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], axis=-1),
            np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


def eval_sh(sh, view_dir) -> np.ndarray:
    """Color at a unit view direction: ``max(0, 0.5 + sum_k sh[k] * Y_k(v))``.

    The 0.5 offset is the conventional DC shift; the clamp keeps colors
    non-negative and acts as a stop-gradient below zero.
    """
    sh = np.asarray(sh, dtype=np.float64)
    v = np.asarray(view_dir, dtype=np.float64)
    if v.shape != (3,):
        raise GaussianError(f"view_dir must have shape (3,), got {v.shape}")
    if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
        raise GaussianError("view_dir must be unit norm")
    degree = sh_degree(sh.shape[0])
    basis = sh_basis(v, degree)
    return np.maximum(0.0, 0.5 + basis @ sh)


def unproject(ray: Ray, depth: float) -> np.ndarray:
    """Point at ``depth`` (ray-distance units) along a ray."""
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    return ray.at(float(depth))
