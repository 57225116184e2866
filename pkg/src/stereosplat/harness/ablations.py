"""Ablation arms over identical seeds and scenes.

Five arms: the full model, three single-flag ablations (no epipolar
attention, no depth encoding on the epipolar keys, regression head instead
of the probabilistic one), and a TV fine-tuning arm that continues from the
full model's weights with the depth regularizer switched on. Arms differ
from the full configuration only in their designated flag.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import SceneSpec, TrainConfig
from .evaluation import evaluate
from .scenes import gen_scene
from .training import train

ARMS = ("full", "no_epipolar", "no_depth_encoding", "no_probabilistic", "plus_depth_reg")

SCALE_RANGE = (0.2, 5.0)


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class AblationRow:
    arm: str
    seed: int
    scale: float
    psnr: float
    ssim: float
    tv: float
    train_seconds: float


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def arm_rows(self, arm: str) -> list[AblationRow]:
        return [r for r in self.rows if r.arm == arm]

    def summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for arm in ARMS:
            rows = self.arm_rows(arm)
            if not rows:
                continue
            out[arm] = {
                "psnr_mean": float(np.mean([r.psnr for r in rows])),
                "psnr_std": float(np.std([r.psnr for r in rows])),
                "ssim_mean": float(np.mean([r.ssim for r in rows])),
                "ssim_std": float(np.std([r.ssim for r in rows])),
                "tv_mean": float(np.mean([r.tv for r in rows])),
                "seeds": len(rows),
            }
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["arm", "seed", "scale", "psnr", "ssim", "tv", "train_seconds"])
            for r in self.rows:
                writer.writerow(
                    [r.arm, r.seed, f"{r.scale:.6g}", f"{r.psnr:.4f}",
                     f"{r.ssim:.6f}", f"{r.tv:.6f}", f"{r.train_seconds:.2f}"]
                )

    def to_markdown(self) -> str:
        lines = [
            "| Arm | PSNR (dB) | SSIM | Depth TV |",
            "|---|---|---|---|",
        ]
        for arm, s in self.summary().items():
            lines.append(
                f"| {arm} | {s['psnr_mean']:.2f} ± {s['psnr_std']:.2f} "
                f"| {s['ssim_mean']:.3f} ± {s['ssim_std']:.3f} | {s['tv_mean']:.3f} |"
            )
        return "\n".join(lines) + "\n"


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    """The single designated change of each ablation arm."""
    if arm in ("full", "plus_depth_reg"):
        return base
    if arm == "no_epipolar":
        return replace(base, no_epipolar=True)
    if arm == "no_depth_encoding":
        return replace(base, no_depth_encoding=True)
    if arm == "no_probabilistic":
        return replace(base, head_mode="regression")
    raise AblationError(f"unknown arm {arm!r}")


def draw_scale(seed: int) -> float:
    """Per-scene global scale factor, log-uniform over SCALE_RANGE."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 91]))
    lo, hi = SCALE_RANGE
    return float(np.exp(rng.uniform(math.log(lo), math.log(hi))))


def run_ablations(
    base: TrainConfig,
    spec: SceneSpec,
    seeds: tuple[int, ...] | list[int],
    out_dir: str | Path | None = None,
    arms: tuple[str, ...] = ARMS,
    randomize_scale: bool = False,
    fine_tune_steps: int | None = None,
    fine_tune_tv_weight: float = 0.05,
) -> AblationTable:
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise AblationError(f"unknown arms {sorted(unknown)}")
    if "plus_depth_reg" in arms and "full" not in arms:
        raise AblationError("plus_depth_reg fine-tunes the full arm, include both")

    rows: list[AblationRow] = []
    for seed in seeds:
        scale = draw_scale(seed) if randomize_scale else spec.scale
        seed_spec = replace(spec, scale=scale)
        scene = gen_scene(seed_spec, seed)
        full_params = None
        for arm in arms:
            config = replace(arm_config(base, arm), seed=seed)
            t0 = time.perf_counter()
            if arm == "plus_depth_reg":
                steps = fine_tune_steps if fine_tune_steps is not None else max(1, base.steps // 2)
                config = replace(
                    config,
                    steps=steps,
                    tv_weight=fine_tune_tv_weight,
                    curriculum_start=base.curriculum_end,
                )
                result = train(config, seed_spec, scene=scene, initial_params=full_params)
            else:
                result = train(config, seed_spec, scene=scene)
            train_seconds = time.perf_counter() - t0
            if arm == "full":
                full_params = result.params
            report = evaluate(scene, result.params, config, seed=seed)
            mode = "regression" if config.head_mode == "regression" else "argmax"
            scores = report.modes[mode]
            rows.append(
                AblationRow(
                    arm=arm,
                    seed=seed,
                    scale=scale,
                    psnr=scores.mean_psnr,
                    ssim=scores.mean_ssim,
                    tv=scores.mean_tv,
                    train_seconds=train_seconds,
                )
            )

    table = AblationTable(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "ablations.csv")
        (out / "ablations.md").write_text(table.to_markdown())
        (out / "ablations_summary.json").write_text(json.dumps(table.summary(), indent=2))
    return table
