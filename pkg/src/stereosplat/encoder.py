"""Scale-resolving two-view encoder.

A small trainable convolutional stack produces per-image feature maps at 1/4
resolution. Each refinement round then applies, per view: epipolar
cross-attention against the other view (each sample on the epipolar line
carries the other view's interpolated feature concatenated with a positional
encoding of its triangulated depth), a residual convolution, and self
attention over all feature pixels. Because the depth encoding normalizes by
the scene's near/far range, and poses are canonicalized by the reference
baseline on entry, the whole computation is invariant to the global scale
ambiguity of the input poses.

All learned tensors live in a flat ``dict[str, Value]`` so the optimizer and
checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Value
from .geometry import Camera, canonicalize_scale, epipolar_segment

DOWNSAMPLE = 4
_CONV_WIDTHS = (32, 64, 64)
_POS_INIT_STD = 0.02


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and sampling choices shared by training and evaluation."""

    image_height: int
    image_width: int
    channels: int = 64
    rounds: int = 2
    bands: int = 8
    samples: int = 32
    no_epipolar: bool = False
    no_depth_encoding: bool = False

    def __post_init__(self) -> None:
        if self.image_height % DOWNSAMPLE or self.image_width % DOWNSAMPLE:
            raise EncoderError(
                f"image size {self.image_height}x{self.image_width} not divisible by {DOWNSAMPLE}"
            )
        if self.channels < 1 or self.rounds < 1 or self.bands < 1 or self.samples < 2:
            raise EncoderError("channels, rounds, bands must be >= 1 and samples >= 2")

    @property
    def feature_height(self) -> int:
        return self.image_height // DOWNSAMPLE

    @property
    def feature_width(self) -> int:
        return self.image_width // DOWNSAMPLE


@dataclass
class DepthEncoding:
    """Sinusoidal encoding of depth, normalized to [0, 1] in disparity.

    n(d) = (1/near - 1/d) / (1/near - 1/far) maps near to 0 and far to 1;
    band k contributes sin and cos at frequency 2*pi*base**k, so both
    endpoints encode to (sines 0, cosines 1) for every band. Out-of-range
    depths are clamped and counted in ``clamp_count``.
    """

    bands: int
    near: float
    far: float
    frequency_base: float = 2.0
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.bands < 1:
            raise EncoderError(f"bands must be positive, got {self.bands}")
        if not 0 < self.near < self.far:
            raise EncoderError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def dimension(self) -> int:
        return 2 * self.bands


def encode_normalized(tau: np.ndarray, bands: int, frequency_base: float = 2.0) -> np.ndarray:
    """Sin/cos features of an already-normalized disparity in [0, 1]."""
    tau = np.asarray(tau, dtype=np.float64)
    freqs = 2.0 * np.pi * frequency_base ** np.arange(bands)
    angles = tau[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def encode_depth(depth: float, enc: DepthEncoding) -> np.ndarray:
    if depth <= 0:
        raise EncoderError(f"depth must be positive, got {depth}")
    inv_near, inv_far = 1.0 / enc.near, 1.0 / enc.far
    tau = (inv_near - 1.0 / depth) / (inv_near - inv_far)
    if tau < 0.0 or tau > 1.0:
        enc.clamp_count += 1
        tau = min(max(tau, 0.0), 1.0)
    return encode_normalized(np.asarray(tau), enc.bands, enc.frequency_base)


@dataclass(frozen=True)
class FeatureMap:
    """Autodiff-tracked feature volume at 1/DOWNSAMPLE of image resolution."""

    values: Value
    image_height: int
    image_width: int
    downsample: int = DOWNSAMPLE

    def __post_init__(self) -> None:
        h, w = self.values.data.shape[:2]
        if h * self.downsample != self.image_height or w * self.downsample != self.image_width:
            raise EncoderError(
                f"feature map {self.values.data.shape} does not tile image "
                f"{self.image_height}x{self.image_width} at 1/{self.downsample}"
            )

    @property
    def height(self) -> int:
        return self.values.data.shape[0]

    @property
    def width(self) -> int:
        return self.values.data.shape[1]

    @property
    def channels(self) -> int:
        return self.values.data.shape[2]


@dataclass(frozen=True)
class EpipolarAttentionRecord:
    """Attention weights over the epipolar samples, for inspection and dumps.

    weights[i, j] sums to 1 for pixels with a valid segment and is all-zero
    otherwise; depths holds the matching triangulated sample depths.
    """

    weights: np.ndarray  # (H_f, W_f, L)
    depths: np.ndarray  # (H_f, W_f, L)
    valid: np.ndarray  # (H_f, W_f) bool


@dataclass(frozen=True)
class SegmentBatch:
    """Epipolar samples for every valid feature pixel of one view.

    pixels/depths/tau are packed over valid pixels only; index holds each
    valid pixel's flat position in the H_f*W_f grid.
    """

    height: int
    width: int
    count: int
    valid: np.ndarray  # (H_f, W_f) bool
    index: np.ndarray  # (N_v,) intp
    pixels: np.ndarray  # (N_v, L, 2)
    depths: np.ndarray  # (N_v, L)
    tau: np.ndarray  # (N_v, L)


def compute_segments(
    source: Camera, target: Camera, near: float, far: float, count: int
) -> SegmentBatch:
    """Sample the epipolar segment of every source feature pixel (cameras
    must already be at feature resolution)."""
    hf, wf = source.height, source.width
    valid = np.zeros((hf, wf), dtype=bool)
    index, pixels, depths, tau = [], [], [], []
    for i in range(hf):
        for j in range(wf):
            seg = epipolar_segment(
                source, target, np.array([j + 0.5, i + 0.5]), near, far, count
            )
            if seg.is_empty:
                continue
            valid[i, j] = True
            index.append(i * wf + j)
            pixels.append(seg.pixels)
            depths.append(seg.depths)
            tau.append(seg.normalized_disparity)
    if not index:
        empty = np.zeros((0, count))
        return SegmentBatch(hf, wf, count, valid, np.zeros(0, dtype=np.intp),
                            np.zeros((0, count, 2)), empty, empty.copy())
    return SegmentBatch(
        height=hf,
        width=wf,
        count=count,
        valid=valid,
        index=np.asarray(index, dtype=np.intp),
        pixels=np.stack(pixels),
        depths=np.stack(depths),
        tau=np.stack(tau),
    )


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Value]:
    """Fresh parameter dictionary.

    Value projections and residual convolutions start at zero so every
    attention and residual layer is the identity at initialization; only the
    plain feature stack is active on step 0.  Epipolar query and key
    projections start at identity (depth-encoding key rows at zero), making
    the initial attention logits the raw correlation between the query
    feature and the sampled feature, so cross-view attention begins as an
    appearance matcher rather than a random bilinear form.
    """
    c = config.channels
    params: dict[str, Value] = {}

    def add(name: str, arr: np.ndarray) -> None:
        params[name] = Value(np.asarray(arr, dtype=np.float64), name=name)

    widths = (3,) + _CONV_WIDTHS + (c,)
    for layer in range(4):
        cin, cout = widths[layer], widths[layer + 1]
        std = math.sqrt(2.0 / (9 * cin))
        add(f"conv{layer}_w", rng.normal(0.0, std, (3, 3, cin, cout)))
        add(f"conv{layer}_b", np.zeros(cout))
    add("feat_ln_gamma", np.ones(c))
    add("feat_ln_beta", np.zeros(c))

    key_dim = c if config.no_depth_encoding else c + 2 * config.bands
    attn_std = 1.0 / math.sqrt(c)
    n_tokens = config.feature_height * config.feature_width
    for r in range(config.rounds):
        if not config.no_epipolar:
            wk = np.zeros((key_dim, c))
            wk[:c, :] = np.eye(c)
            add(f"round{r}_epi_wq", np.eye(c))
            add(f"round{r}_epi_wk", wk)
            add(f"round{r}_epi_wv", np.zeros((key_dim, c)))
        add(f"round{r}_res_w", np.zeros((3, 3, c, c)))
        add(f"round{r}_res_b", np.zeros(c))
        add(f"round{r}_self_wq", rng.normal(0.0, attn_std, (c, c)))
        add(f"round{r}_self_wk", rng.normal(0.0, attn_std, (c, c)))
        add(f"round{r}_self_wv", np.zeros((c, c)))
        add(f"round{r}_pos", rng.normal(0.0, _POS_INIT_STD, (n_tokens, c)))
    return params


def extract_features(image: np.ndarray, params: dict[str, Value]) -> Value:
    """Four 3x3 convolutions with stride pattern (2, 2, 1, 1), ReLU after
    each, then a channel layer norm; returns an (H/4, W/4, C) Value."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise EncoderError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[0] % DOWNSAMPLE or image.shape[1] % DOWNSAMPLE:
        raise EncoderError(f"image size {image.shape[:2]} not divisible by {DOWNSAMPLE}")
    half = (slice(None, None, 2), slice(None, None, 2))
    x = autodiff.relu(autodiff.conv2d(image, params["conv0_w"], params["conv0_b"]))
    x = autodiff.slice_(x, half)
    x = autodiff.relu(autodiff.conv2d(x, params["conv1_w"], params["conv1_b"]))
    x = autodiff.slice_(x, half)
    x = autodiff.relu(autodiff.conv2d(x, params["conv2_w"], params["conv2_b"]))
    x = autodiff.relu(autodiff.conv2d(x, params["conv3_w"], params["conv3_b"]))
    return autodiff.layer_norm(x, params["feat_ln_gamma"], params["feat_ln_beta"])


def _bilinear_rows(flat_other: Value, height: int, width: int, coords: np.ndarray) -> Value:
    """Clamp-to-edge bilinear interpolation of a flattened (H*W, C) map at
    continuous pixel coordinates (N, 2)."""
    gx = coords[:, 0] - 0.5
    gy = coords[:, 1] - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    x0c = np.clip(x0, 0, width - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, width - 1).astype(np.intp)
    y0c = np.clip(y0, 0, height - 1).astype(np.intp)
    y1c = np.clip(y0 + 1, 0, height - 1).astype(np.intp)
    g00 = autodiff.gather_rows(flat_other, y0c * width + x0c)
    g01 = autodiff.gather_rows(flat_other, y0c * width + x1c)
    g10 = autodiff.gather_rows(flat_other, y1c * width + x0c)
    g11 = autodiff.gather_rows(flat_other, y1c * width + x1c)
    return (
        g00 * ((1.0 - fx) * (1.0 - fy))
        + g01 * (fx * (1.0 - fy))
        + g10 * ((1.0 - fx) * fy)
        + g11 * (fx * fy)
    )


def epipolar_attention_layer(
    feat: Value,
    feat_other: Value,
    segments: SegmentBatch,
    wq: Value,
    wk: Value,
    wv: Value,
    enc: DepthEncoding | None,
) -> tuple[Value, EpipolarAttentionRecord]:
    """Cross-attention from each valid pixel to its epipolar samples in the
    other view; enc=None drops the depth encoding from the keys/values."""
    hf, wf, c = feat.data.shape
    ho, wo = feat_other.data.shape[:2]
    n_valid, count = segments.depths.shape
    weights = np.zeros((hf, wf, count))
    depths = np.zeros((hf, wf, count))
    if n_valid == 0:
        return feat, EpipolarAttentionRecord(weights, depths, segments.valid.copy())

    flat = autodiff.reshape(feat, (hf * wf, c))
    flat_other = autodiff.reshape(feat_other, (ho * wo, c))
    sampled = _bilinear_rows(flat_other, ho, wo, segments.pixels.reshape(-1, 2))
    if enc is None:
        s = sampled
    else:
        gamma = encode_normalized(segments.tau.reshape(-1), enc.bands, enc.frequency_base)
        s = autodiff.concat([sampled, autodiff.wrap(gamma)], axis=1)
    if s.data.shape[1] != wk.data.shape[0]:
        raise EncoderError(
            f"sample dimension {s.data.shape[1]} does not match key projection {wk.data.shape}"
        )

    k = autodiff.reshape(s @ wk, (n_valid, count, c))
    v = autodiff.reshape(s @ wv, (n_valid, count, c))
    q = autodiff.gather_rows(flat, segments.index) @ wq
    logits = autodiff.sum_(autodiff.reshape(q, (n_valid, 1, c)) * k, axis=2) * (
        1.0 / math.sqrt(c)
    )
    att = autodiff.softmax(logits, axis=1)
    update = autodiff.sum_(autodiff.reshape(att, (n_valid, count, 1)) * v, axis=1)
    out = autodiff.reshape(flat + autodiff.scatter_rows(update, segments.index, hf * wf), (hf, wf, c))

    weights.reshape(hf * wf, count)[segments.index] = att.data
    depths.reshape(hf * wf, count)[segments.index] = segments.depths
    return out, EpipolarAttentionRecord(weights, depths, segments.valid.copy())


def residual_conv_layer(feat: Value, w: Value, b: Value) -> Value:
    return feat + autodiff.conv2d(feat, w, b)


def self_attention_layer(
    feat: Value, wq: Value, wk: Value, wv: Value, pos: Value | None
) -> Value:
    """Residual single-head self-attention over all feature pixels; the
    learned positional embedding enters the query/key projections only."""
    hf, wf, c = feat.data.shape
    tokens = autodiff.reshape(feat, (hf * wf, c))
    if pos is None:
        qk_in = tokens
    else:
        if pos.data.shape != (hf * wf, c):
            raise EncoderError(
                f"positional embedding {pos.data.shape} does not match {hf * wf} tokens"
            )
        qk_in = tokens + pos
    q = qk_in @ wq
    k = qk_in @ wk
    v = tokens @ wv
    att = autodiff.softmax((q @ autodiff.transpose(k)) * (1.0 / math.sqrt(c)), axis=1)
    return autodiff.reshape(tokens + att @ v, (hf, wf, c))


@dataclass(frozen=True)
class EncodeResult:
    features_a: FeatureMap
    features_b: FeatureMap
    records_a: list  # one EpipolarAttentionRecord per round (empty when no_epipolar)
    records_b: list
    cameras: tuple[Camera, Camera]  # canonicalized, image resolution
    near: float
    far: float
    baseline: float
    extra_cameras: tuple[Camera, ...] = ()  # canonicalized alongside the pair


def encode_pair(
    image_a: np.ndarray,
    image_b: np.ndarray,
    camera_a: Camera,
    camera_b: Camera,
    near: float,
    far: float,
    params: dict[str, Value],
    config: EncoderConfig,
    rounds: int | None = None,
    segments: tuple[SegmentBatch, SegmentBatch] | None = None,
    canonicalize: bool = True,
    extra_cameras: Sequence[Camera] = (),
) -> EncodeResult:
    """Full two-view encoding: canonicalize scale, extract features, then
    run the refinement rounds with symmetric cross-view updates.

    Both views share each round's weights, and both epipolar updates within
    a round read the maps from before the round, so swapping the inputs
    swaps the outputs exactly. Precomputed ``segments`` (from
    :func:`compute_segments` on the canonicalized feature cameras) can be
    passed to skip the geometry recomputation. ``extra_cameras`` (target
    poses, for example) ride along through the same canonicalization.
    """
    image_a = np.asarray(image_a, dtype=np.float64)
    image_b = np.asarray(image_b, dtype=np.float64)
    rounds = config.rounds if rounds is None else rounds
    if not 1 <= rounds <= config.rounds:
        raise EncoderError(f"rounds must be in [1, {config.rounds}], got {rounds}")
    expected = (config.image_height, config.image_width, 3)
    if image_a.shape != expected or image_b.shape != expected:
        raise EncoderError(
            f"images must have shape {expected}, got {image_a.shape} and {image_b.shape}"
        )
    extra = tuple(extra_cameras)
    if canonicalize:
        cams, near, far, baseline = canonicalize_scale(
            [camera_a, camera_b, *extra], near, far
        )
        camera_a, camera_b = cams[0], cams[1]
        extra = tuple(cams[2:])
    else:
        baseline = float(np.linalg.norm(camera_b.t - camera_a.t))

    enc = None if config.no_depth_encoding else DepthEncoding(config.bands, near, far)
    if not config.no_epipolar and segments is None:
        feat_cam_a = camera_a.scaled(DOWNSAMPLE)
        feat_cam_b = camera_b.scaled(DOWNSAMPLE)
        segments = (
            compute_segments(feat_cam_a, feat_cam_b, near, far, config.samples),
            compute_segments(feat_cam_b, feat_cam_a, near, far, config.samples),
        )

    fa = extract_features(image_a, params)
    fb = extract_features(image_b, params)
    records_a: list[EpipolarAttentionRecord] = []
    records_b: list[EpipolarAttentionRecord] = []
    for r in range(rounds):
        key = f"round{r}"
        if not config.no_epipolar:
            wq, wk, wv = params[f"{key}_epi_wq"], params[f"{key}_epi_wk"], params[f"{key}_epi_wv"]
            fa_new, rec_a = epipolar_attention_layer(fa, fb, segments[0], wq, wk, wv, enc)
            fb_new, rec_b = epipolar_attention_layer(fb, fa, segments[1], wq, wk, wv, enc)
            fa, fb = fa_new, fb_new
            records_a.append(rec_a)
            records_b.append(rec_b)
        fa = residual_conv_layer(fa, params[f"{key}_res_w"], params[f"{key}_res_b"])
        fb = residual_conv_layer(fb, params[f"{key}_res_w"], params[f"{key}_res_b"])
        pos = params[f"{key}_pos"]
        fa = self_attention_layer(
            fa, params[f"{key}_self_wq"], params[f"{key}_self_wk"], params[f"{key}_self_wv"], pos
        )
        fb = self_attention_layer(
            fb, params[f"{key}_self_wq"], params[f"{key}_self_wk"], params[f"{key}_self_wv"], pos
        )

    h, w = image_a.shape[:2]
    return EncodeResult(
        features_a=FeatureMap(fa, h, w),
        features_b=FeatureMap(fb, h, w),
        records_a=records_a,
        records_b=records_b,
        cameras=(camera_a, camera_b),
        near=near,
        far=far,
        baseline=baseline,
        extra_cameras=extra,
    )
