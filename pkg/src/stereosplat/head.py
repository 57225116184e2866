"""Pixel-aligned Gaussian prediction head.

Depth is parameterized by Z buckets uniform in disparity. The head maps a
feature vector to bucket probabilities phi, per-bucket offsets delta, raw
covariance parameters, SH coefficients, and two extra logits used only by
the direct-regression baseline. In the probabilistic mode a bucket is
sampled from phi and the Gaussian's opacity is set to the sampled
probability itself, so the photometric gradient on opacity flows straight
into the depth distribution; the sampling event carries no gradient.

``predict`` and the other per-pixel operations mirror the batched functions
the training loop uses; both run through the same underlying network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Value
from .gaussians import GaussianPrimitive, sh_coefficient_count
from .geometry import Ray


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class DepthBuckets:
    """Bucket depths b_z = 1 / ((1 - z/Z)(1/near - 1/far) + 1/far).

    widths[z] = b_{z+1} - b_z with the virtual b_Z fixed at far, so an
    offset in [0, 1] scaled by the width stays inside the bucket.
    """

    near: float
    far: float
    depths: np.ndarray  # (Z,)
    widths: np.ndarray  # (Z,)

    @property
    def count(self) -> int:
        return self.depths.shape[0]


def make_buckets(near: float, far: float, z_count: int) -> DepthBuckets:
    if not 0 < near < far:
        raise HeadError(f"need 0 < near < far, got {near}, {far}")
    if z_count < 2:
        raise HeadError(f"need at least 2 buckets, got {z_count}")
    z = np.arange(z_count, dtype=np.float64)
    inv_near, inv_far = 1.0 / near, 1.0 / far
    depths = 1.0 / ((1.0 - z / z_count) * (inv_near - inv_far) + inv_far)
    boundaries = np.append(depths[1:], far)
    return DepthBuckets(near=near, far=far, depths=depths, widths=boundaries - depths)


@dataclass(frozen=True)
class HeadConfig:
    z_count: int = 64
    hidden: int = 128
    sh_degree: int = 1
    # Eq. 8 taken literally adds delta in scene units; the default scales it
    # by the bucket width so the depth stays between bucket boundaries.
    literal_offset: bool = False

    def __post_init__(self) -> None:
        if self.z_count < 2 or self.hidden < 1:
            raise HeadError("z_count must be >= 2 and hidden >= 1")
        if self.sh_degree not in (0, 1, 2):
            raise HeadError(f"sh_degree must be 0, 1, or 2, got {self.sh_degree}")

    @property
    def sh_count(self) -> int:
        return sh_coefficient_count(self.sh_degree)


def output_dimension(config: HeadConfig) -> int:
    """Raw slots: phi, delta, scale, rotation, SH, depth and opacity logits."""
    return 2 * config.z_count + 3 + 4 + 3 * config.sh_count + 2


def _slot_ranges(config: HeadConfig) -> dict[str, slice]:
    z = config.z_count
    k3 = 3 * config.sh_count
    edges = [0, z, 2 * z, 2 * z + 3, 2 * z + 7, 2 * z + 7 + k3, 2 * z + 8 + k3, 2 * z + 9 + k3]
    names = ["phi", "delta", "scale", "rotation", "sh", "depth_logit", "opacity_logit"]
    return {n: slice(e0, e1) for n, e0, e1 in zip(names, edges[:-1], edges[1:])}


def init_head_params(
    config: HeadConfig, channels: int, rng: np.random.Generator, scale_bias: float
) -> dict[str, Value]:
    """Two-layer MLP parameters.

    The final bias starts rotations at the identity quaternion and log-scales
    at ``scale_bias`` (the caller picks a size matching roughly one feature
    pixel at the scene's mid depth); final weights start small so step 0
    predicts near-uniform phi and centered offsets.
    """
    out_dim = output_dimension(config)
    slots = _slot_ranges(config)
    b2 = np.zeros(out_dim)
    b2[slots["rotation"]] = (1.0, 0.0, 0.0, 0.0)
    b2[slots["scale"]] = scale_bias
    params = {
        "head_w1": Value(
            rng.normal(0.0, math.sqrt(2.0 / channels), (channels, config.hidden)), name="head_w1"
        ),
        "head_b1": Value(np.zeros(config.hidden), name="head_b1"),
        "head_w2": Value(rng.normal(0.0, 0.01, (config.hidden, out_dim)), name="head_w2"),
        "head_b2": Value(b2, name="head_b2"),
    }
    return params


@dataclass(frozen=True)
class BatchedPrediction:
    """Head outputs for N feature pixels, all autodiff-tracked."""

    phi: Value  # (N, Z)
    delta: Value  # (N, Z)
    scale_raw: Value  # (N, 3)
    rotation_raw: Value  # (N, 4)
    sh: Value  # (N, K, 3)
    depth_logit: Value  # (N,)
    opacity_logit: Value  # (N,)

    @property
    def count(self) -> int:
        return self.phi.data.shape[0]


@dataclass(frozen=True)
class HeadOutput:
    """Single-pixel view of :class:`BatchedPrediction`."""

    phi: Value  # (Z,)
    delta: Value  # (Z,)
    scale_raw: Value  # (3,)
    rotation_raw: Value  # (4,)
    sh: Value  # (K, 3)
    depth_logit: Value  # scalar
    opacity_logit: Value  # scalar


def predict_batch(features: Value, params: dict[str, Value], config: HeadConfig) -> BatchedPrediction:
    if features.data.ndim != 2 or features.data.shape[1] != params["head_w1"].data.shape[0]:
        raise HeadError(
            f"features {features.data.shape} do not match head input "
            f"{params['head_w1'].data.shape[0]}"
        )
    n = features.data.shape[0]
    hidden = autodiff.relu(features @ params["head_w1"] + params["head_b1"])
    raw = hidden @ params["head_w2"] + params["head_b2"]
    slots = _slot_ranges(config)
    grab = lambda name: autodiff.slice_(raw, (slice(None), slots[name]))
    return BatchedPrediction(
        phi=autodiff.softmax(grab("phi"), axis=1),
        delta=autodiff.sigmoid(grab("delta")),
        scale_raw=grab("scale"),
        rotation_raw=grab("rotation"),
        sh=autodiff.reshape(grab("sh"), (n, config.sh_count, 3)),
        depth_logit=autodiff.reshape(grab("depth_logit"), (n,)),
        opacity_logit=autodiff.reshape(grab("opacity_logit"), (n,)),
    )


def predict(feature: Value | np.ndarray, params: dict[str, Value], config: HeadConfig) -> HeadOutput:
    feature = autodiff.wrap(feature)
    if feature.data.ndim != 1:
        raise HeadError(f"feature must be a vector, got shape {feature.data.shape}")
    batch = predict_batch(autodiff.reshape(feature, (1, feature.data.shape[0])), params, config)
    row = lambda v: autodiff.slice_(v, 0)
    return HeadOutput(
        phi=row(batch.phi),
        delta=row(batch.delta),
        scale_raw=row(batch.scale_raw),
        rotation_raw=row(batch.rotation_raw),
        sh=row(batch.sh),
        depth_logit=row(batch.depth_logit),
        opacity_logit=row(batch.opacity_logit),
    )


def _check_distribution(phi: np.ndarray) -> None:
    if np.any(phi < 0.0):
        raise HeadError("phi has negative entries")
    if abs(float(phi.sum()) - 1.0) > 1e-6:
        raise HeadError(f"phi sums to {float(phi.sum())}, not 1")


def sample_depth(phi: np.ndarray, rng: np.random.Generator) -> int:
    """Categorical draw by inverse CDF on a single uniform variate."""
    phi = np.asarray(phi, dtype=np.float64)
    _check_distribution(phi)
    cdf = np.cumsum(phi)
    z = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(z, phi.shape[0] - 1)


def reparameterized_opacity(phi: Value, z: int) -> Value:
    """alpha = phi_z; the backward routes dL/dalpha into phi_z unchanged."""
    if phi.data.ndim != 1:
        raise HeadError(f"phi must be a vector, got shape {phi.data.shape}")
    if not 0 <= z < phi.data.shape[0]:
        raise HeadError(f"bucket index {z} out of range [0, {phi.data.shape[0]})")
    return autodiff.slice_(phi, z)


def _realized_depth(
    buckets: DepthBuckets, delta: Value, z: np.ndarray, literal_offset: bool
) -> Value:
    taken = autodiff.take_per_row(delta, z)
    if literal_offset:
        return taken + buckets.depths[z]
    return taken * buckets.widths[z] + buckets.depths[z]


@dataclass(frozen=True)
class GaussianBatch:
    """Per-pixel Gaussian parameters as tape Values plus the sampled buckets."""

    means: Value  # (N, 3)
    scale_raw: Value  # (N, 3)
    rotation_raw: Value  # (N, 4)
    opacity: Value  # (N,)
    sh: Value  # (N, K, 3)
    z_index: np.ndarray  # (N,) sampled or argmax bucket per pixel
    depth: Value  # (N,)

    @property
    def count(self) -> int:
        return self.means.data.shape[0]


def gaussians_from_prediction(
    pred: BatchedPrediction,
    origins: np.ndarray,
    directions: np.ndarray,
    buckets: DepthBuckets,
    rng: np.random.Generator | None,
    mode: str = "sample",
    literal_offset: bool = False,
) -> GaussianBatch:
    """Algorithm: pick a bucket per pixel (categorical sample or argmax),
    realize its depth with the width-scaled offset, unproject along the
    pixel ray, and couple opacity to the picked bucket's probability."""
    n = pred.count
    if origins.shape != (n, 3) or directions.shape != (n, 3):
        raise HeadError(f"need (N, 3) rays for N={n}, got {origins.shape} and {directions.shape}")
    if mode == "sample":
        if rng is None:
            raise HeadError("sample mode needs an rng")
        z = np.array([sample_depth(pred.phi.data[i], rng) for i in range(n)], dtype=np.intp)
    elif mode == "argmax":
        z = np.argmax(pred.phi.data, axis=1).astype(np.intp)
    else:
        raise HeadError(f"mode must be 'sample' or 'argmax', got {mode!r}")
    depth = _realized_depth(buckets, pred.delta, z, literal_offset)
    means = autodiff.reshape(depth, (n, 1)) * directions + origins
    alpha = autodiff.take_per_row(pred.phi, z)
    return GaussianBatch(
        means=means,
        scale_raw=pred.scale_raw,
        rotation_raw=pred.rotation_raw,
        opacity=alpha,
        sh=pred.sh,
        z_index=z,
        depth=depth,
    )


def regression_gaussians(
    pred: BatchedPrediction,
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
) -> GaussianBatch:
    """Direct-regression baseline: depth from a sigmoid squashed to
    [near, far], opacity from its own logit; no sampling anywhere."""
    n = pred.count
    if origins.shape != (n, 3) or directions.shape != (n, 3):
        raise HeadError(f"need (N, 3) rays for N={n}, got {origins.shape} and {directions.shape}")
    depth = autodiff.sigmoid(pred.depth_logit) * (far - near) + near
    means = autodiff.reshape(depth, (n, 1)) * directions + origins
    return GaussianBatch(
        means=means,
        scale_raw=pred.scale_raw,
        rotation_raw=pred.rotation_raw,
        opacity=autodiff.sigmoid(pred.opacity_logit),
        sh=pred.sh,
        z_index=np.full(n, -1, dtype=np.intp),
        depth=depth,
    )


def _detached_primitive(batch: GaussianBatch, i: int) -> GaussianPrimitive:
    return GaussianPrimitive(
        mean=batch.means.data[i].copy(),
        scale_raw=batch.scale_raw.data[i].copy(),
        rotation_raw=batch.rotation_raw.data[i].copy(),
        opacity=float(batch.opacity.data[i]),
        sh=batch.sh.data[i].copy(),
    )


def batch_primitives(batch: GaussianBatch) -> list[GaussianPrimitive]:
    """Detach a batch into per-pixel primitives, e.g. for export."""
    return [_detached_primitive(batch, i) for i in range(batch.count)]


def pixel_gaussian(
    feature: Value | np.ndarray,
    ray: Ray,
    buckets: DepthBuckets,
    params: dict[str, Value],
    config: HeadConfig,
    rng: np.random.Generator | None = None,
    mode: str = "sample",
) -> GaussianPrimitive:
    """Single-pixel probabilistic prediction, detached from the tape."""
    feature = autodiff.wrap(feature)
    pred = predict_batch(autodiff.reshape(feature, (1, feature.data.shape[0])), params, config)
    if buckets.count != config.z_count:
        raise HeadError(f"buckets have {buckets.count} entries, config wants {config.z_count}")
    batch = gaussians_from_prediction(
        pred,
        ray.origin[None],
        ray.direction[None],
        buckets,
        rng,
        mode=mode,
        literal_offset=config.literal_offset,
    )
    return _detached_primitive(batch, 0)


def regress_depth_baseline(
    feature: Value | np.ndarray,
    ray: Ray,
    near: float,
    far: float,
    params: dict[str, Value],
    config: HeadConfig,
) -> GaussianPrimitive:
    """Single-pixel regression baseline, detached from the tape."""
    feature = autodiff.wrap(feature)
    pred = predict_batch(autodiff.reshape(feature, (1, feature.data.shape[0])), params, config)
    batch = regression_gaussians(pred, ray.origin[None], ray.direction[None], near, far)
    return _detached_primitive(batch, 0)
