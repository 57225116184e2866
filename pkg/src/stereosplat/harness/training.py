"""Photometric training loop.

Each step picks a reference pair whose baseline follows the curriculum and a
random target view strictly between them, canonicalizes the three poses by
the pair baseline, encodes the pair, predicts one Gaussian per feature pixel
of both references, renders the target view, and descends the MSE (plus the
optional edge-aware depth TV term). Ground-truth depth never enters the
loss; supervision is photometric only.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff
from ..autodiff import Value
from ..encoder import (
    DOWNSAMPLE,
    EncoderConfig,
    SegmentBatch,
    compute_segments,
    encode_pair,
    init_encoder_params,
)
from ..geometry import Camera, camera_ray_grid, canonicalize_scale
from ..head import (
    HeadConfig,
    gaussians_from_prediction,
    init_head_params,
    make_buckets,
    predict_batch,
    regression_gaussians,
)
from ..rasterizer import render_value
from .config import ConfigError, SceneSpec, TrainConfig
from .metrics import psnr, tv_depth_regularizer
from .scenes import Scene, gen_scene

_INITIAL_SIGMA_PIXELS = 0.9  # initial splat half-width, in feature pixels


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: dict[str, Value]
    scene: Scene
    log: list[dict]
    final_loss: float
    final_psnr: float
    checkpoint_path: Path | None
    log_path: Path | None


def encoder_config_for(config: TrainConfig, spec: SceneSpec) -> EncoderConfig:
    return EncoderConfig(
        image_height=spec.image_height,
        image_width=spec.image_width,
        channels=config.channels,
        rounds=config.rounds,
        samples=config.samples,
        no_epipolar=config.no_epipolar,
        no_depth_encoding=config.no_depth_encoding,
    )


def head_config_for(config: TrainConfig) -> HeadConfig:
    return HeadConfig(
        z_count=config.z_count,
        hidden=config.hidden,
        sh_degree=config.sh_degree,
        literal_offset=config.literal_offset,
    )


def curriculum_fraction(config: TrainConfig, step: int) -> float:
    ramp_steps = max(1, config.steps // 2)
    t = min(1.0, step / ramp_steps)
    return config.curriculum_start + (config.curriculum_end - config.curriculum_start) * t


def _pair_for_fraction(fraction: float, track_count: int) -> tuple[int, int]:
    center = (track_count - 1) // 2
    half = max(1, round(fraction * center))
    return center - half, center + half


def feature_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature-pixel rays of an image-resolution camera: (N_f, 3) each."""
    feat_cam = camera.scaled(DOWNSAMPLE)
    origins, dirs = camera_ray_grid(feat_cam)
    return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def predict_pair_gaussians(
    enc_result,
    params: dict[str, Value],
    head_config: HeadConfig,
    rng: np.random.Generator | None,
    head_mode: str,
    mode: str = "sample",
):
    """Gaussians for every feature pixel of both encoded reference views."""
    fa, fb = enc_result.features_a, enc_result.features_b
    c = fa.channels
    features = autodiff.concat(
        [
            autodiff.reshape(fa.values, (fa.height * fa.width, c)),
            autodiff.reshape(fb.values, (fb.height * fb.width, c)),
        ],
        axis=0,
    )
    oa, da = feature_rays(enc_result.cameras[0])
    ob, db = feature_rays(enc_result.cameras[1])
    origins = np.concatenate([oa, ob])
    directions = np.concatenate([da, db])
    pred = predict_batch(features, params, head_config)
    if head_mode == "probabilistic":
        buckets = make_buckets(enc_result.near, enc_result.far, head_config.z_count)
        return gaussians_from_prediction(
            pred, origins, directions, buckets, rng,
            mode=mode, literal_offset=head_config.literal_offset,
        )
    return regression_gaussians(pred, origins, directions, enc_result.near, enc_result.far)


def initial_scale_bias(spec: SceneSpec, fraction: float) -> float:
    """Log-scale giving splats about one feature pixel's footprint at the
    mid depth of the first curriculum pair's canonical range."""
    center = (spec.track_count - 1) // 2
    half = max(1, round(fraction * center))
    pair_baseline = spec.baseline * spec.scale * (2 * half) / (spec.track_count - 1)
    near_c = spec.near * spec.scale / pair_baseline
    far_c = spec.far * spec.scale / pair_baseline
    fx = 0.87 * spec.image_width
    sigma = _INITIAL_SIGMA_PIXELS * 0.5 * (near_c + far_c) * DOWNSAMPLE / fx
    return math.log(sigma)


def init_params(
    config: TrainConfig, spec: SceneSpec, rng: np.random.Generator
) -> dict[str, Value]:
    enc_config = encoder_config_for(config, spec)
    head_config = head_config_for(config)
    params = init_encoder_params(enc_config, rng)
    params.update(
        init_head_params(
            head_config,
            config.channels,
            rng,
            scale_bias=initial_scale_bias(spec, config.curriculum_start),
        )
    )
    return params


def params_from_checkpoint(
    path: str | Path,
    config: TrainConfig | None = None,
    spec: SceneSpec | None = None,
) -> dict[str, Value]:
    """Load a checkpoint as tape parameters, validated against the config's
    expected names and shapes when given."""
    arrays = autodiff.load_checkpoint(path)
    if config is not None and spec is not None:
        expected = init_params(config, spec, np.random.default_rng(0))
        if set(expected) != set(arrays):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigError(
                f"checkpoint does not match config: missing {missing}, unexpected {extra}"
            )
        for name, value in expected.items():
            if value.data.shape != arrays[name].shape:
                raise ConfigError(
                    f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                    f"config expects {value.data.shape}"
                )
    return {name: Value(arr, name=name) for name, arr in arrays.items()}


def train(
    config: TrainConfig,
    spec: SceneSpec,
    out_dir: str | Path | None = None,
    scene: Scene | None = None,
    initial_params: dict[str, Value] | None = None,
) -> TrainResult:
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    if scene is None:
        scene = gen_scene(spec, config.seed)
    seq = np.random.SeedSequence(config.seed)
    init_seq, loop_seq = seq.spawn(2)
    rng_init = np.random.default_rng(init_seq)
    rng_loop = np.random.default_rng(loop_seq)

    enc_config = encoder_config_for(config, spec)
    head_config = head_config_for(config)
    if initial_params is None:
        params = init_params(config, spec, rng_init)
    else:
        params = {k: Value(v.data.copy(), name=k) for k, v in initial_params.items()}

    opt = autodiff.Adam(params, lr=config.learning_rate)
    segment_cache: dict[int, tuple[SegmentBatch, SegmentBatch]] = {}
    log: list[dict] = []
    log_path = out / "train_log.jsonl" if out else None
    log_file = open(log_path, "w") if log_path else None
    final_loss = float("nan")
    final_psnr = float("nan")
    try:
        t_start = time.perf_counter()
        for step in range(config.steps):
            fraction = curriculum_fraction(config, step)
            ia, ib = _pair_for_fraction(fraction, spec.track_count)
            target = int(rng_loop.integers(ia + 1, ib))
            cams, near_c, far_c, _ = canonicalize_scale(
                [scene.cameras[ia], scene.cameras[ib], scene.cameras[target]],
                scene.near,
                scene.far,
            )
            half = (ib - ia) // 2
            if not config.no_epipolar and half not in segment_cache:
                fa_cam = cams[0].scaled(DOWNSAMPLE)
                fb_cam = cams[1].scaled(DOWNSAMPLE)
                segment_cache[half] = (
                    compute_segments(fa_cam, fb_cam, near_c, far_c, config.samples),
                    compute_segments(fb_cam, fa_cam, near_c, far_c, config.samples),
                )
            result = encode_pair(
                scene.images[ia],
                scene.images[ib],
                cams[0],
                cams[1],
                near_c,
                far_c,
                params,
                enc_config,
                segments=segment_cache.get(half),
                canonicalize=False,
            )
            batch = predict_pair_gaussians(
                result, params, head_config, rng_loop, config.head_mode
            )
            rendered = render_value(
                cams[2],
                batch.means,
                batch.scale_raw,
                batch.rotation_raw,
                batch.opacity,
                batch.sh,
                scene.background,
            )
            target_image = scene.images[target]
            color = autodiff.slice_(rendered, (slice(None), slice(None), slice(0, 3)))
            loss = autodiff.mse(color, target_image) * config.mse_weight
            if config.tv_weight > 0.0:
                depth_channel = autodiff.slice_(rendered, (slice(None), slice(None), 3))
                loss = loss + tv_depth_regularizer(depth_channel, target_image) * config.tv_weight

            final_loss = float(loss.data)
            if not np.isfinite(final_loss):
                dump = {"step": step, "loss": final_loss, "recent": log[-5:]}
                if out:
                    (out / "divergence.json").write_text(json.dumps(dump, indent=2))
                raise TrainingDiverged(f"loss became {final_loss} at step {step}")

            opt.zero_grad()
            autodiff.backward(loss)
            opt.step()

            final_psnr = float(psnr(np.clip(color.data, 0.0, 1.0), target_image))
            if step % config.log_every == 0 or step == config.steps - 1:
                entry = {
                    "step": step,
                    "loss": final_loss,
                    "psnr": final_psnr,
                    "fraction": round(fraction, 4),
                    "pair": [ia, ib],
                    "target": target,
                    "elapsed": round(time.perf_counter() - t_start, 3),
                }
                log.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
            if out and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                autodiff.save_checkpoint(out / f"checkpoint_{step + 1:06d}.ckpt", params)
    finally:
        if log_file:
            log_file.close()

    checkpoint_path = None
    if out:
        checkpoint_path = out / "checkpoint.ckpt"
        autodiff.save_checkpoint(checkpoint_path, params)
    return TrainResult(
        params=params,
        scene=scene,
        log=log,
        final_loss=final_loss,
        final_psnr=final_psnr,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
    )
