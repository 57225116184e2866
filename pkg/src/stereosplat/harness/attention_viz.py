"""Epipolar attention inspection.

Two consumers: a correspondence check that scores how often the attention
argmax lands on the sample nearest the true depth, and a dump that writes
the query view with the probed pixel marked plus the other view with every
epipolar sample shaded by its attention weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import Value
from ..encoder import DOWNSAMPLE, SegmentBatch, compute_segments
from ..geometry import camera_ray_grid
from .config import TrainConfig
from .evaluation import encode_scene_pair
from .images import save_png
from .scenes import Scene
from .training import encoder_config_for

_MARK_HALF = 2  # query marker halfwidth in image pixels


class AttentionVizError(ValueError):
    pass


@dataclass(frozen=True)
class CorrespondenceReport:
    total: int  # valid feature pixels probed
    within_one: int  # argmax within one sample of the true correspondence
    fraction: float
    offsets: np.ndarray  # (total,) |argmax - true index| per probed pixel


def _normalized_disparity(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    inv_near, inv_far = 1.0 / near, 1.0 / far
    return (inv_near - 1.0 / depth) / (inv_near - inv_far)


def _feature_depths(depth_map: np.ndarray, hf: int, wf: int) -> np.ndarray:
    """Ground-truth depth at each feature pixel's center."""
    h, w = depth_map.shape
    rows = np.minimum(np.arange(hf) * DOWNSAMPLE + DOWNSAMPLE // 2, h - 1)
    cols = np.minimum(np.arange(wf) * DOWNSAMPLE + DOWNSAMPLE // 2, w - 1)
    return depth_map[np.ix_(rows, cols)]


def correspondence_check(
    scene: Scene,
    params: dict[str, Value],
    config: TrainConfig,
    round_index: int = -1,
) -> CorrespondenceReport:
    """Score attention argmax against the depth-map correspondence.

    Uses view A of the reference pair. Requires the scene's ground-truth
    depth maps, which exist only for generated scenes.
    """
    if scene.depths is None:
        raise AttentionVizError("scene has no ground-truth depth maps")
    if config.no_epipolar:
        raise AttentionVizError("no epipolar attention to inspect")
    result = encode_scene_pair(scene, params, config)
    record = result.records_a[round_index]
    hf, wf, _ = record.weights.shape

    cam_a, cam_b = (c.scaled(DOWNSAMPLE) for c in result.cameras)
    segments = compute_segments(cam_a, cam_b, result.near, result.far, config.samples)

    ia, _ = scene.reference_pair
    z = _feature_depths(scene.depths[ia], hf, wf) / result.baseline
    # Segment depths measure distance along the ray; depth maps store camera z.
    _, dirs = camera_ray_grid(cam_a)
    gt = z / (dirs @ cam_a.R[:, 2])
    tau_gt = _normalized_disparity(gt, result.near, result.far)

    offsets = []
    flat_tau_gt = tau_gt.reshape(-1)
    for row, flat in enumerate(segments.index):
        true_idx = int(np.argmin(np.abs(segments.tau[row] - flat_tau_gt[flat])))
        i, j = divmod(int(flat), wf)
        attn_idx = int(np.argmax(record.weights[i, j]))
        offsets.append(abs(attn_idx - true_idx))
    offsets = np.asarray(offsets, dtype=np.int64)
    within = int(np.count_nonzero(offsets <= 1))
    total = int(offsets.size)
    return CorrespondenceReport(
        total=total,
        within_one=within,
        fraction=within / total if total else 0.0,
        offsets=offsets,
    )


def _segment_row(segments: SegmentBatch, flat: int) -> int | None:
    pos = int(np.searchsorted(segments.index, flat))
    if pos < segments.index.size and segments.index[pos] == flat:
        return pos
    return None


def _mark_query(image: np.ndarray, x: float, y: float) -> np.ndarray:
    out = image.copy()
    h, w = out.shape[:2]
    xi, yi = int(x), int(y)
    y0, y1 = max(0, yi - _MARK_HALF), min(h, yi + _MARK_HALF + 1)
    x0, x1 = max(0, xi - _MARK_HALF), min(w, xi + _MARK_HALF + 1)
    out[y0:y1, x0:x1] = [1.0, 0.0, 0.0]
    return out


def _shade_samples(
    image: np.ndarray, pixels: np.ndarray, weights_u8: np.ndarray
) -> np.ndarray:
    """Paint each epipolar sample; weight 255 is pure red, 0 pure blue."""
    out = image.copy()
    h, w = out.shape[:2]
    for (px, py), shade in zip(pixels, weights_u8):
        xi = int(np.clip(np.floor(px), 0, w - 1))
        yi = int(np.clip(np.floor(py), 0, h - 1))
        t = shade / 255.0
        out[yi, xi] = [t, 0.0, 1.0 - t]
    return out


def dump_attention(
    scene: Scene,
    params: dict[str, Value],
    config: TrainConfig,
    queries: list[tuple[float, float]],
    out_dir: str | Path,
    round_index: int = -1,
) -> list[Path]:
    """Write, per query pixel, the marked reference view, the other view
    with samples shaded by attention weight, and a sidecar JSON recording
    the raw weights and the [0, 255] normalization scale."""
    if config.no_epipolar:
        raise AttentionVizError("no epipolar attention to dump")
    enc_config = encoder_config_for(config, scene.spec)
    result = encode_scene_pair(scene, params, config)
    record = result.records_a[round_index]
    rounds = len(result.records_a)
    hf, wf, _ = record.weights.shape

    cam_a, cam_b = (c.scaled(DOWNSAMPLE) for c in result.cameras)
    segments = compute_segments(cam_a, cam_b, result.near, result.far, config.samples)

    ia, ib = scene.reference_pair
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for k, (qx, qy) in enumerate(queries):
        fi, fj = int(qy) // DOWNSAMPLE, int(qx) // DOWNSAMPLE
        if not (0 <= fi < hf and 0 <= fj < wf):
            raise AttentionVizError(
                f"query ({qx}, {qy}) outside the {enc_config.image_width}x"
                f"{enc_config.image_height} image"
            )
        flat = fi * wf + fj
        row = _segment_row(segments, flat)
        sidecar: dict = {
            "query_image_xy": [float(qx), float(qy)],
            "query_feature_ij": [fi, fj],
            "round": round_index % rounds,
            "reference_view": ia,
            "target_view": ib,
            "weight_scale": 255,
            "baseline": result.baseline,
            "near": result.near,
            "far": result.far,
        }
        ref_png = out / f"query{k}_reference.png"
        save_png(ref_png, _mark_query(scene.images[ia], qx, qy))
        written.append(ref_png)

        if row is None:
            sidecar["skipped"] = True
            sidecar["reason"] = "empty epipolar segment"
        else:
            weights = record.weights[fi, fj]
            peak = float(weights.max())
            u8 = np.zeros(weights.shape, dtype=np.uint8)
            if peak > 0:
                u8 = np.rint(weights / peak * 255.0).astype(np.uint8)
            pixels_image = segments.pixels[row] * DOWNSAMPLE
            sidecar["skipped"] = False
            sidecar["max_weight"] = peak
            sidecar["weights_u8"] = u8.tolist()
            sidecar["weights"] = weights.tolist()
            sidecar["sample_pixels_image"] = pixels_image.tolist()
            sidecar["sample_tau"] = segments.tau[row].tolist()
            sidecar["sample_depths"] = segments.depths[row].tolist()
            tgt_png = out / f"query{k}_target.png"
            save_png(tgt_png, _shade_samples(scene.images[ib], pixels_image, u8))
            written.append(tgt_png)

        js = out / f"query{k}_attention.json"
        js.write_text(json.dumps(sidecar, indent=2))
        written.append(js)
    return written
