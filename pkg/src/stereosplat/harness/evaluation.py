"""Held-out view evaluation.

The widest camera pair of a scene's track is the reference pair; every view
strictly between them is held out. Gaussians are predicted once from the
encoded pair and re-rendered at each held-out pose, so the numbers measure
novel-view quality of a single reconstruction, not per-view refits.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Value
from ..encoder import EncodeResult, encode_pair
from ..head import GaussianBatch
from ..rasterizer import render_arrays
from .config import TrainConfig
from .metrics import psnr, ssim, tv_energy
from .scenes import Scene
from .training import (
    encoder_config_for,
    head_config_for,
    predict_pair_gaussians,
)


@dataclass
class ViewScore:
    view: int
    psnr: float
    ssim: float
    tv: float


@dataclass
class ModeReport:
    mode: str
    views: list[ViewScore]
    mean_psnr: float
    mean_ssim: float
    mean_tv: float


@dataclass
class EvalReport:
    modes: dict[str, ModeReport]
    reference_pair: tuple[int, int]
    gaussian_count: int
    encode_seconds: float
    render_seconds: float
    log: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "reference_pair": list(self.reference_pair),
            "gaussian_count": self.gaussian_count,
            "encode_seconds": round(self.encode_seconds, 4),
            "render_seconds": round(self.render_seconds, 4),
            "modes": {
                name: {
                    "mean_psnr": report.mean_psnr,
                    "mean_ssim": report.mean_ssim,
                    "mean_tv": report.mean_tv,
                    "views": [
                        {"view": v.view, "psnr": v.psnr, "ssim": v.ssim, "tv": v.tv}
                        for v in report.views
                    ],
                }
                for name, report in self.modes.items()
            },
        }


def encode_scene_pair(
    scene: Scene, params: dict[str, Value], config: TrainConfig
) -> EncodeResult:
    """Encode the widest pair with every camera canonicalized alongside it."""
    ia, ib = scene.reference_pair
    enc_config = encoder_config_for(config, scene.spec)
    return encode_pair(
        scene.images[ia],
        scene.images[ib],
        scene.cameras[ia],
        scene.cameras[ib],
        scene.near,
        scene.far,
        params,
        enc_config,
        extra_cameras=[scene.cameras[i] for i in scene.target_indices],
    )


def predict_scene_gaussians(
    scene: Scene,
    params: dict[str, Value],
    config: TrainConfig,
    mode: str = "argmax",
    rng: np.random.Generator | None = None,
) -> tuple[GaussianBatch, EncodeResult]:
    """One reconstruction of the scene from its reference pair."""
    result = encode_scene_pair(scene, params, config)
    batch = predict_pair_gaussians(
        result, params, head_config_for(config), rng, config.head_mode, mode=mode
    )
    return batch, result


def evaluate(
    scene: Scene,
    params: dict[str, Value],
    config: TrainConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> EvalReport:
    modes = ["argmax", "sample"] if config.head_mode == "probabilistic" else ["regression"]
    t0 = time.perf_counter()
    result = encode_scene_pair(scene, params, config)
    encode_seconds = time.perf_counter() - t0

    held_out = scene.target_indices
    target_cams = result.extra_cameras
    reports: dict[str, ModeReport] = {}
    render_seconds = 0.0
    count = 0
    for mode in modes:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        batch = predict_pair_gaussians(
            result, params, head_config_for(config), rng, config.head_mode, mode=mode
        )
        count = batch.count
        scores = []
        for view, cam in zip(held_out, target_cams):
            t1 = time.perf_counter()
            rendered = render_arrays(
                cam,
                batch.means.data,
                batch.scale_raw.data,
                batch.rotation_raw.data,
                batch.opacity.data,
                batch.sh.data,
                scene.background,
            )
            render_seconds += time.perf_counter() - t1
            truth = scene.images[view]
            scores.append(
                ViewScore(
                    view=view,
                    psnr=float(psnr(np.clip(rendered.color, 0.0, 1.0), truth)),
                    ssim=float(ssim(np.clip(rendered.color, 0.0, 1.0), truth)),
                    tv=float(tv_energy(rendered.depth, truth)),
                )
            )
        reports[mode] = ModeReport(
            mode=mode,
            views=scores,
            mean_psnr=float(np.mean([s.psnr for s in scores])),
            mean_ssim=float(np.mean([s.ssim for s in scores])),
            mean_tv=float(np.mean([s.tv for s in scores])),
        )

    report = EvalReport(
        modes=reports,
        reference_pair=scene.reference_pair,
        gaussian_count=count,
        encode_seconds=encode_seconds,
        render_seconds=render_seconds,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
