"""Finite-difference audit of the rasterizer's analytic backward pass.

Each trial builds a random camera and splat set, contracts the rendered
color and depth channels against fixed random cotangents to get a scalar,
and compares the analytic input gradients with central differences of that
scalar. Relative error is reported per parameter class; entries whose
analytic magnitude is tiny are held to an absolute tolerance instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import Camera
from ..rasterizer import (
    T_STOP,
    W_CLAMP,
    W_SKIP,
    RenderGradients,
    _project_arrays,
    render_arrays,
    render_backward_arrays,
)

PARAM_CLASSES = ("mean", "scale_raw", "rotation_raw", "opacity", "sh")

REL_TOL = 1e-3
ABS_TOL = 1e-6
SMALL_GRAD = 1e-4

# Safety bands around the compositing branch points. A +-1e-4 probe of any
# single input moves a per-pixel weight by under 1e-4, a transmittance by a
# relative 5e-2, a camera depth by under 1e-3, and a pre-clamp color channel
# by under 1e-4, so a base value outside its band cannot change branch
# during the probe.
_BAND_SKIP = 2e-3
_BAND_CLAMP = 5e-2
_BAND_STOP = 5e-4
_BAND_COLOR = 5e-3
_BAND_SORT = 5e-3
_MAX_EVENT_FRACTION = 0.25


@dataclass(frozen=True)
class GradCheckScene:
    camera: Camera
    means: np.ndarray
    scale_raw: np.ndarray
    rotation_raw: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    background: np.ndarray
    grad_color: np.ndarray
    grad_depth: np.ndarray


@dataclass
class GradCheckReport:
    scenes: int
    step: float
    max_rel: dict[str, float]  # worst relative error per class
    max_abs_small: dict[str, float]  # worst absolute error among tiny-gradient entries
    failures: int
    elapsed: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _draw_scene(rng: np.random.Generator) -> GradCheckScene:
    h = int(rng.integers(8, 20))
    w = int(rng.integers(8, 20))
    fx = 0.8 * w * rng.uniform(0.8, 1.2)
    fy = 0.8 * h * rng.uniform(0.8, 1.2)
    K = np.array([[fx, 0.0, w / 2.0], [0.0, fy, h / 2.0], [0.0, 0.0, 1.0]])
    axis = rng.normal(size=3)
    angle = rng.uniform(-0.15, 0.15)
    axis *= angle / np.linalg.norm(axis)
    wx, wy, wz = axis
    omega = np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])
    R = np.eye(3) + omega + 0.5 * (omega @ omega)
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    camera = Camera(K, R, rng.normal(0.0, 0.2, 3), w, h)

    n = int(rng.integers(2, 7))
    degree = int(rng.integers(0, 2))
    k = (degree + 1) ** 2
    depth = rng.uniform(1.5, 6.0, n)
    xs = (rng.uniform(0.15, 0.85, n) * w - w / 2.0) * depth / fx
    ys = (rng.uniform(0.15, 0.85, n) * h - h / 2.0) * depth / fy
    means_cam = np.stack([xs, ys, depth], axis=1)
    means = means_cam @ R.T + camera.t

    return GradCheckScene(
        camera=camera,
        means=means,
        scale_raw=rng.uniform(-2.2, -0.7, (n, 3)),
        rotation_raw=rng.normal(0.0, 1.0, (n, 4)) + np.array([2.0, 0.0, 0.0, 0.0]),
        opacity=rng.uniform(0.25, 0.9, n),
        sh=rng.uniform(-0.4, 0.9, (n, k, 3)),
        background=rng.uniform(0.0, 1.0, 3),
        grad_color=rng.normal(0.0, 1.0, (h, w, 3)),
        grad_depth=rng.normal(0.0, 1.0, (h, w)),
    )


def _event_pixels(scene: GradCheckScene) -> np.ndarray | None:
    """Mask of pixels where a probe could flip a compositing branch.

    Returns None when the scene is unsafe as a whole: a splat lost to
    culling (a probe could re-admit it), a near-tie in the depth sort, or a
    pre-clamp color channel within the band of zero.
    """
    proj = _project_arrays(
        scene.camera,
        scene.means,
        scene.scale_raw,
        scene.rotation_raw,
        scene.opacity,
        scene.sh,
    )
    n = scene.means.shape[0]
    if proj.kept.shape[0] != n:
        return None
    if np.min(np.abs(proj.color_pre)) <= _BAND_COLOR:
        return None
    if n > 1 and np.min(np.diff(np.sort(proj.z))) <= _BAND_SORT:
        return None
    xs = (np.arange(scene.camera.width) + 0.5)[None, :]
    ys = (np.arange(scene.camera.height) + 0.5)[:, None]
    event = np.zeros((scene.camera.height, scene.camera.width), dtype=bool)
    T = np.ones_like(event, dtype=np.float64)
    for i in range(n):
        dx = xs - proj.mean2d[i, 0]
        dy = ys - proj.mean2d[i, 1]
        power = -0.5 * ((proj.inv_a[i] * dx) * dx + (proj.inv_c[i] * dy) * dy) - proj.inv_b[i] * (dx * dy)
        w_raw = proj.opacity[i] * np.exp(power)
        w = np.minimum(w_raw, W_CLAMP)
        event |= np.abs(w - W_SKIP) <= _BAND_SKIP
        event |= np.abs(w_raw - W_CLAMP) <= _BAND_CLAMP
        event |= np.abs(T - T_STOP) <= _BAND_STOP
        visible = (power <= 0.0) & (w >= W_SKIP) & (T >= T_STOP)
        T = T * np.where(visible, 1.0 - w, 1.0)
    return event


def random_scene(rng: np.random.Generator) -> GradCheckScene:
    """Draw a random camera and splat set safe for central differences.

    The compositing branches on the skip, saturation, and termination
    thresholds, the color clamp, the depth sort, and the cull test; a probe
    straddling any of them turns the central difference into a jump estimate
    that no analytic gradient matches. Scenes with a splat-level branch
    within reach of a probe are redrawn, and cotangents are zeroed on the
    few pixels sitting inside a threshold band.
    """
    while True:
        scene = _draw_scene(rng)
        event = _event_pixels(scene)
        if event is None or event.mean() > _MAX_EVENT_FRACTION:
            continue
        if not event.any():
            return scene
        grad_color = scene.grad_color.copy()
        grad_depth = scene.grad_depth.copy()
        grad_color[event] = 0.0
        grad_depth[event] = 0.0
        return replace(scene, grad_color=grad_color, grad_depth=grad_depth)


def _objective(scene: GradCheckScene, arrays: dict[str, np.ndarray]) -> float:
    img = render_arrays(
        scene.camera,
        arrays["mean"],
        arrays["scale_raw"],
        arrays["rotation_raw"],
        arrays["opacity"],
        arrays["sh"],
        scene.background,
    )
    return float(np.sum(img.color * scene.grad_color) + np.sum(img.depth * scene.grad_depth))


def _analytic(scene: GradCheckScene) -> RenderGradients:
    return render_backward_arrays(
        scene.camera,
        scene.means,
        scene.scale_raw,
        scene.rotation_raw,
        scene.opacity,
        scene.sh,
        scene.background,
        scene.grad_color,
        scene.grad_depth,
    )


def check_scene(scene: GradCheckScene, step: float = 1e-4) -> dict[str, dict[str, float]]:
    """Central differences over every scalar input of one scene."""
    grads = _analytic(scene)
    analytic = {
        "mean": grads.mean,
        "scale_raw": grads.scale_raw,
        "rotation_raw": grads.rotation_raw,
        "opacity": grads.opacity,
        "sh": grads.sh,
    }
    arrays = {
        "mean": scene.means,
        "scale_raw": scene.scale_raw,
        "rotation_raw": scene.rotation_raw,
        "opacity": scene.opacity,
        "sh": scene.sh,
    }
    out: dict[str, dict[str, float]] = {}
    for cls in PARAM_CLASSES:
        base = arrays[cls]
        rel_worst = 0.0
        abs_small_worst = 0.0
        for idx in np.ndindex(base.shape):
            work = {k: v.copy() for k, v in arrays.items()}
            work[cls][idx] = base[idx] + step
            f_plus = _objective(scene, work)
            work[cls][idx] = base[idx] - step
            f_minus = _objective(scene, work)
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(analytic[cls][idx])
            if abs(an) < SMALL_GRAD and abs(fd) < SMALL_GRAD:
                abs_small_worst = max(abs_small_worst, abs(an - fd))
            else:
                rel = abs(an - fd) / max(abs(an), abs(fd))
                rel_worst = max(rel_worst, rel)
        out[cls] = {"rel": rel_worst, "abs_small": abs_small_worst}
    return out


def run_suite(seed: int = 0, scenes: int = 100, step: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    max_rel = {cls: 0.0 for cls in PARAM_CLASSES}
    max_abs = {cls: 0.0 for cls in PARAM_CLASSES}
    failures = 0
    t0 = time.perf_counter()
    for _ in range(scenes):
        scene = random_scene(rng)
        result = check_scene(scene, step)
        for cls in PARAM_CLASSES:
            max_rel[cls] = max(max_rel[cls], result[cls]["rel"])
            max_abs[cls] = max(max_abs[cls], result[cls]["abs_small"])
            if result[cls]["rel"] >= REL_TOL or result[cls]["abs_small"] >= ABS_TOL:
                failures += 1
    return GradCheckReport(
        scenes=scenes,
        step=step,
        max_rel=max_rel,
        max_abs_small=max_abs,
        failures=failures,
        elapsed=time.perf_counter() - t0,
    )
