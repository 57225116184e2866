"""Two-view pinhole geometry: rays, projection, epipolar sampling, triangulation.

Conventions used across the package:

- Camera pose is world-from-camera: ``x_world = R @ x_cam + t``. The camera
  center in world coordinates is ``t`` and the world-to-camera rotation is
  ``R.T``.
- Pixel coordinates are continuous ``(x, y)`` with x along the width axis.
  The center of integer pixel ``(row i, col j)`` is ``(j + 0.5, i + 0.5)``
  and the image spans ``[0, width) x [0, height)``.
- A :class:`Ray` direction is unit norm. Depths attached to rays are
  distances along that unit direction; :func:`project` returns the
  camera-frame z coordinate, which differs from ray distance by the
  direction's z component in the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for geometric domain errors."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth in the camera frame."""


class DegenerateTriangulationError(GeometryError):
    """Rays too close to parallel for a stable closest-approach solve."""


_ORTHONORMAL_TOL = 1e-9


def _as_f64(x, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-from-camera pose.

    Parameters
    ----------
    K : (3, 3) array
        Intrinsics with positive focal lengths, zero skew, K[2,2] = 1.
    R : (3, 3) array
        World-from-camera rotation (orthonormal, det +1 within 1e-9).
    t : (3,) array
        Camera center in world coordinates.
    width, height : int
        Image size in pixels.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        K = _as_f64(self.K, (3, 3), "K")
        R = _as_f64(self.R, (3, 3), "R")
        t = _as_f64(self.t, (3,), "t")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1 or K[0, 1] != 0:
            raise GeometryError("K must be diagonal-plus-principal-point with K[2,2] = 1")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHONORMAL_TOL):
            raise GeometryError("R must be orthonormal within 1e-9")
        if np.linalg.det(R) < 0:
            raise GeometryError("R must have determinant +1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.t) @ self.R

    def scaled(self, factor: float) -> "Camera":
        """Camera viewing the same rays at 1/factor resolution.

        Used to express feature-map pixels (after downsampling by ``factor``)
        in their own pixel coordinates.
        """
        if self.width % factor or self.height % factor:
            raise GeometryError("image size must be divisible by the scale factor")
        S = np.diag([1.0 / factor, 1.0 / factor, 1.0])
        return Camera(S @ self.K, self.R, self.t, self.width // factor, self.height // factor)


@dataclass(frozen=True)
class Ray:
    """Ray with unit-norm direction; ``origin`` is the camera center."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        o = _as_f64(self.origin, (3,), "origin")
        d = _as_f64(self.direction, (3,), "direction")
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-12:
            raise GeometryError(f"direction must be unit norm, |d| = {n!r}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, depth: float) -> np.ndarray:
        return self.origin + depth * self.direction


@dataclass(frozen=True)
class EpipolarSegment:
    """Samples of a source ray projected into a target image.

    ``pixels[k]`` is the target-image projection of the source-ray point at
    depth ``depths[k]``; depths increase along the segment and are uniformly
    spaced in disparity (reciprocal depth). ``normalized_disparity[k]`` is the
    position of ``1/depths[k]`` inside ``[1/near, 1/far]``, which equals the
    depth-encoding normalization ``n(depths[k])`` exactly and is stored so
    downstream consumers need not recompute it from scale-dependent values.

    An empty segment (no in-bounds samples) has zero-length arrays.
    """

    source_pixel: np.ndarray
    pixels: np.ndarray
    depths: np.ndarray
    normalized_disparity: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.depths.shape[0] == 0

    def __len__(self) -> int:
        return int(self.depths.shape[0])


def _check_pixel(camera: Camera, pixel: np.ndarray) -> np.ndarray:
    p = _as_f64(pixel, (2,), "pixel")
    if not (0.0 <= p[0] < camera.width and 0.0 <= p[1] < camera.height):
        raise GeometryError(f"pixel {p} outside [0, {camera.width}) x [0, {camera.height})")
    return p


def camera_ray(camera: Camera, pixel) -> Ray:
    """Ray through a continuous pixel coordinate.

    Parameters
    ----------
    camera : Camera
    pixel : (2,) array-like
        Continuous pixel coordinate in ``[0, width) x [0, height)``; pass
        ``(j + 0.5, i + 0.5)`` for the center of integer pixel ``(i, j)``.

    Returns
    -------
    Ray
        Origin at the camera center with unit world-space direction.
    """
    p = _check_pixel(camera, pixel)
    # K is upper triangular, so back-substitution beats a general solve.
    x = (p[0] - camera.cx) / camera.fx
    y = (p[1] - camera.cy) / camera.fy
    d_cam = np.array([x, y, 1.0])
    d_world = camera.R @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(camera.t, d_world)


def camera_ray_grid(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-space ray directions through every pixel center.

    Returns
    -------
    (origins, directions)
        Both (height, width, 3); origins are all the camera center.
    """
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    x = (xs[None, :] - camera.cx) / camera.fx
    y = (ys[:, None] - camera.cy) / camera.fy
    d_cam = np.stack(
        [np.broadcast_to(x, (camera.height, camera.width)),
         np.broadcast_to(y, (camera.height, camera.width)),
         np.ones((camera.height, camera.width))],
        axis=-1,
    )
    d_world = d_cam @ camera.R.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.t, d_world.shape).copy()
    return origins, d_world


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    """Perspective-project a world point.

    Returns
    -------
    (pixel, depth)
        ``pixel`` is the continuous image coordinate (not bounds-checked);
        ``depth`` is the camera-frame z coordinate.

    Raises
    ------
    BehindCameraError
        If the camera-frame z coordinate is not strictly positive.
    """
    pt = _as_f64(point, (3,), "point")
    pc = camera.world_to_camera(pt)
    z = float(pc[2])
    if z <= 0.0:
        raise BehindCameraError(f"point has camera-frame z = {z}")
    pixel = np.array([camera.fx * pc[0] / z + camera.cx, camera.fy * pc[1] / z + camera.cy])
    return pixel, z


def _project_unchecked(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection without behind-camera errors; returns (pixels, z)."""
    pc = camera.world_to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * pc[..., 0] / z + camera.cx
        py = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([px, py], axis=-1), z


def triangulate_depth(source: Camera, source_pixel, target: Camera, target_pixel) -> float:
    """Depth along the source ray of the closest approach of the two pixel rays.

    Uses the midpoint construction: solve the 2x2 normal equations for the
    parameters minimizing the distance between points on the two rays and
    return the source-ray parameter.

    Raises
    ------
    DegenerateTriangulationError
        If the ray directions are near parallel (cross-product norm < 1e-9).
    """
    r1 = camera_ray(source, source_pixel)
    r2 = camera_ray(target, target_pixel)
    d1, d2 = r1.direction, r2.direction
    if np.linalg.norm(np.cross(d1, d2)) < 1e-9:
        raise DegenerateTriangulationError("rays are near parallel")
    w0 = r1.origin - r2.origin
    a = float(d1 @ w0)
    c = float(d2 @ w0)
    b = float(d1 @ d2)
    return (c * b - a) / (1.0 - b * b)


_PROBE_FACTOR = 4
_BOUNDS_MARGIN = 1e-9


def epipolar_segment(
    source: Camera,
    target: Camera,
    pixel,
    near: float,
    far: float,
    count: int = 32,
) -> EpipolarSegment:
    """Project the source ray's [near, far] depth range into the target image.

    Depths are parameterized uniformly in disparity. A probe grid (four
    probes per output sample) locates the contiguous in-bounds disparity
    interval (pixel inside the target image, point in front of the target
    camera); ``count`` samples are then placed uniformly in disparity across
    that interval. Fewer than two in-bounds probes yields an empty segment.

    Returns
    -------
    EpipolarSegment
        Samples ordered by increasing depth.
    """
    if not (0.0 < near < far):
        raise GeometryError(f"need 0 < near < far, got near={near}, far={far}")
    if count < 2:
        raise GeometryError("count must be at least 2")
    if np.array_equal(source.t, target.t):
        raise GeometryError("cameras must have distinct centers")
    p = _check_pixel(source, pixel)
    ray = camera_ray(source, p)

    inv_near = 1.0 / near
    inv_far = 1.0 / far
    n_probe = _PROBE_FACTOR * count

    def sample_at(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        disparity = inv_near + tau * (inv_far - inv_near)
        depths = 1.0 / disparity
        points = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
        pixels, z = _project_unchecked(target, points)
        return pixels, depths, z

    tau_probe = np.linspace(0.0, 1.0, n_probe)
    pixels, _, z = sample_at(tau_probe)
    inside = (
        (z > 0.0)
        & (pixels[:, 0] >= _BOUNDS_MARGIN)
        & (pixels[:, 0] <= target.width - _BOUNDS_MARGIN)
        & (pixels[:, 1] >= _BOUNDS_MARGIN)
        & (pixels[:, 1] <= target.height - _BOUNDS_MARGIN)
    )
    idx = np.nonzero(inside)[0]
    if idx.size < 2:
        empty = np.empty((0,))
        return EpipolarSegment(p, np.empty((0, 2)), empty, empty)

    tau_lo = tau_probe[idx[0]]
    tau_hi = tau_probe[idx[-1]]
    # Ascending tau descends in disparity, so depths come out increasing.
    tau = tau_lo + (tau_hi - tau_lo) * np.linspace(0.0, 1.0, count)
    pixels, depths, _ = sample_at(tau)
    return EpipolarSegment(p, pixels, depths, tau)


def scale_scene(cameras, s: float) -> list[Camera]:
    """Scale camera translations by ``s`` (intrinsics and rotations unchanged)."""
    if s <= 0:
        raise GeometryError("scale must be positive")
    return [Camera(c.K, c.R, s * c.t, c.width, c.height) for c in cameras]


def snap_mantissa(x, bits: int = 40):
    """Round the mantissa of each value to ``bits`` bits.

    Exactly-representable at the reduced precision, so re-snapping is a
    no-op; used to absorb last-ulp differences between arithmetically
    equivalent computations.
    """
    m, e = np.frexp(np.asarray(x, dtype=np.float64))
    scale = float(np.ldexp(1.0, bits))
    return np.ldexp(np.round(m * scale) / scale, e)


def canonicalize_scale(
    cameras, near: float, far: float, reference: tuple[int, int] = (0, 1)
) -> tuple[list[Camera], float, float, float]:
    """Rescale a scene so the reference-pair baseline is 1.

    Divides every camera translation and the near/far planes by the distance
    between the two reference camera centers, snapping each normalized scalar
    to 40 mantissa bits. Two scenes that differ only by a global scale of the
    poses and depth range canonicalize to bit-identical values (the snap
    absorbs the last-ulp rounding differences introduced by the scaling), so
    everything computed downstream is invariant to the input scale.

    Returns
    -------
    (cameras, near, far, scale)
        ``scale`` is the divisor; multiply canonical depths by it to return
        to input units.
    """
    i, j = reference
    baseline = float(np.linalg.norm(cameras[i].t - cameras[j].t))
    if baseline <= 0.0:
        raise GeometryError("reference cameras must have distinct centers")
    canon = [
        Camera(c.K, c.R, snap_mantissa(c.t / baseline), c.width, c.height) for c in cameras
    ]
    near_c = float(snap_mantissa(near / baseline))
    far_c = float(snap_mantissa(far / baseline))
    return canon, near_c, far_c, baseline
