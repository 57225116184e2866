"""Command-line entry point.

Subcommands: gen-scene, train, eval, ablate, grad-check, export-ply,
dump-attention. Every command accepts --seed, --config and --out; all
randomness in a run derives from the single seed. Exit codes: 0 success,
1 validation problem (bad flags, config, or inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..encoder import EncoderError
from ..geometry import GeometryError
from ..head import HeadError, batch_primitives
from ..rasterizer import RasterizerError
from .ablations import ARMS, AblationError, run_ablations
from .attention_viz import AttentionVizError, dump_attention
from .config import ConfigError, SceneSpec, TrainConfig, load_config
from .evaluation import evaluate, predict_scene_gaussians
from .gradcheck import run_suite
from .ply import PlyError, export_ply
from .scenes import SceneError, gen_scene, load_scene, save_scene
from .training import TrainingDiverged, params_from_checkpoint, train

_VALIDATION_ERRORS = (
    ConfigError,
    SceneError,
    GeometryError,
    EncoderError,
    HeadError,
    RasterizerError,
    PlyError,
    AblationError,
    AttentionVizError,
    FileNotFoundError,
    json.JSONDecodeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _load(args) -> tuple[SceneSpec, TrainConfig]:
    if args.config is not None:
        spec, config = load_config(args.config)
    else:
        spec, config = SceneSpec(), TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return spec, config


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("this command needs --out")
    return Path(args.out)


def _scene_for(args, spec: SceneSpec, config: TrainConfig):
    if getattr(args, "scene", None) is not None:
        return load_scene(args.scene, spec)
    return gen_scene(spec, config.seed)


def _cmd_gen_scene(args) -> int:
    spec, config = _load(args)
    out = _require_out(args)
    scene = gen_scene(spec, config.seed)
    path = save_scene(scene, out)
    print(f"wrote {len(scene.cameras)} views to {path}")
    return 0


def _cmd_train(args) -> int:
    spec, config = _load(args)
    out = _require_out(args)
    scene = _scene_for(args, spec, config) if args.scene else None
    result = train(config, spec, out_dir=out, scene=scene)
    print(
        f"trained {config.steps} steps: loss {result.final_loss:.6f}, "
        f"train-view psnr {result.final_psnr:.2f} dB"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    spec, config = _load(args)
    scene = _scene_for(args, spec, config)
    params = params_from_checkpoint(args.checkpoint, config, spec)
    report = evaluate(scene, params, config, seed=config.seed, out_dir=args.out)
    for mode, scores in report.modes.items():
        print(
            f"{mode}: psnr {scores.mean_psnr:.2f} dB, ssim {scores.mean_ssim:.4f}, "
            f"depth tv {scores.mean_tv:.4f}"
        )
    print(
        f"encode {report.encode_seconds:.3f} s, render {report.render_seconds:.3f} s "
        f"({len(report.modes[next(iter(report.modes))].views)} views, "
        f"{report.gaussian_count} gaussians)"
    )
    return 0


def _cmd_ablate(args) -> int:
    spec, config = _load(args)
    out = _require_out(args)
    base_seed = config.seed
    seeds = [base_seed + i for i in range(args.seeds)]
    arms = tuple(args.arms.split(",")) if args.arms else ARMS
    table = run_ablations(
        config,
        spec,
        seeds,
        out_dir=out,
        arms=arms,
        randomize_scale=args.randomize_scale,
        fine_tune_steps=args.fine_tune_steps,
        fine_tune_tv_weight=args.fine_tune_tv,
    )
    print(table.to_markdown())
    print(f"wrote {out / 'ablations.csv'}")
    return 0


def _cmd_grad_check(args) -> int:
    report = run_suite(seed=args.seed if args.seed is not None else 0, scenes=args.count)
    print(f"{report.scenes} scenes, step {report.step:g}, {report.elapsed:.1f} s")
    for cls in report.max_rel:
        print(
            f"  {cls:>12}: max rel {report.max_rel[cls]:.3e}, "
            f"max abs (small grads) {report.max_abs_small[cls]:.3e}"
        )
    if not report.passed:
        print(f"FAILED: {report.failures} class checks out of tolerance")
        return 2
    print("all parameter classes within tolerance")
    return 0


def _cmd_export_ply(args) -> int:
    spec, config = _load(args)
    out = _require_out(args)
    scene = _scene_for(args, spec, config)
    params = params_from_checkpoint(args.checkpoint, config, spec)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))
    batch, _ = predict_scene_gaussians(scene, params, config, mode=args.mode, rng=rng)
    path = out if out.suffix == ".ply" else out / "gaussians.ply"
    path.parent.mkdir(parents=True, exist_ok=True)
    export_ply(batch_primitives(batch), path, opacity_logit=args.opacity_logit)
    print(f"wrote {batch.count} gaussians to {path}")
    return 0


def _cmd_dump_attention(args) -> int:
    spec, config = _load(args)
    out = _require_out(args)
    scene = _scene_for(args, spec, config)
    params = params_from_checkpoint(args.checkpoint, config, spec)
    if args.query:
        queries = []
        for q in args.query:
            x, y = q.split(",")
            queries.append((float(x), float(y)))
    else:
        h, w = spec.image_height, spec.image_width
        queries = [(w * f, h / 2.0) for f in (0.25, 0.5, 0.75)]
    written = dump_attention(scene, params, config, queries, out, round_index=args.round)
    print(f"wrote {len(written)} files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--config", type=str, default=None, help="JSON config path")
    common.add_argument("--out", type=str, default=None, help="output directory (or file)")

    parser = _Parser(prog="stereosplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-scene", parents=[common]).set_defaults(fn=_cmd_gen_scene)

    p = sub.add_parser("train", parents=[common])
    p.add_argument("--scene", type=str, default=None, help="posed image directory to train on")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--scene", type=str, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per arm")
    p.add_argument("--arms", type=str, default=None, help="comma-separated arm subset")
    p.add_argument("--randomize-scale", action="store_true")
    p.add_argument("--fine-tune-steps", type=int, default=None)
    p.add_argument("--fine-tune-tv", type=float, default=0.05)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("grad-check", parents=[common])
    p.add_argument("--count", type=int, default=25, help="number of random scenes")
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("export-ply", parents=[common])
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--scene", type=str, default=None)
    p.add_argument("--mode", choices=("argmax", "sample"), default="argmax")
    p.add_argument("--opacity-logit", action="store_true",
                   help="write pre-sigmoid opacity for splat viewers")
    p.set_defaults(fn=_cmd_export_ply)

    p = sub.add_parser("dump-attention", parents=[common])
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--scene", type=str, default=None)
    p.add_argument("--query", action="append", default=None, metavar="X,Y",
                   help="image pixel to probe (repeatable)")
    p.add_argument("--round", type=int, default=-1)
    p.set_defaults(fn=_cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - final safety net
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
