"""Synthetic two-view scenes: textured planes and a straight camera track.

Images come from an analytic ray-plane intersector, fully independent of the
splatting renderer, so rendered reconstructions can be scored against a
ground truth that shares no code with the model. Textures are band-limited
value noise (smoothstep-interpolated random lattices) so the 4x feature
downsampling keeps most of the texture variance; the "blocks" mode swaps in
flat distinctly-colored patches for correspondence probes.

The global scale factor multiplies poses, near/far, and ground-truth depths
only. Images are rendered once at unit scale: a scaled scene is the same
world seen through rescaled pose metadata, which is exactly the ambiguity
the encoder must absorb.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Camera, camera_ray_grid
from .config import SceneSpec
from .images import load_png, load_raw, save_png, save_raw

BACKGROUND = np.array([0.1, 0.1, 0.1])
_NOISE_OCTAVES = 3
_NOISE_BASE_RES = 2
_NOISE_PERSISTENCE = 0.55
_BLOCK_RES = 16


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class _Plane:
    point: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit, facing -z
    e_u: np.ndarray  # (3,) in-plane unit axes
    e_v: np.ndarray
    ext_u: float  # half extents in scene units; inf = unbounded
    ext_v: float
    tile: float  # texture tile size in scene units
    mode: str
    lattices: tuple[np.ndarray, ...]


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _make_lattices(rng: np.random.Generator, mode: str) -> tuple[np.ndarray, ...]:
    if mode == "blocks":
        return (rng.random((_BLOCK_RES, _BLOCK_RES, 3)),)
    grids = []
    for octave in range(_NOISE_OCTAVES):
        res = _NOISE_BASE_RES * 2**octave
        grid = rng.random((res + 1, res + 1, 3))
        # Tileable: opposite edges share lattice values.
        grid[res, :] = grid[0, :]
        grid[:, res] = grid[:, 0]
        grids.append(grid)
    return tuple(grids)


def _sample_texture(plane: _Plane, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Evaluate the plane texture at in-plane coordinates (scene units)."""
    uu = np.mod(u / plane.tile + 0.5, 1.0)
    vv = np.mod(v / plane.tile + 0.5, 1.0)
    if plane.mode == "blocks":
        colors = plane.lattices[0]
        iu = np.minimum((uu * _BLOCK_RES).astype(np.intp), _BLOCK_RES - 1)
        iv = np.minimum((vv * _BLOCK_RES).astype(np.intp), _BLOCK_RES - 1)
        return colors[iv, iu]
    acc = np.zeros(uu.shape + (3,))
    total = 0.0
    amp = 1.0
    for grid in plane.lattices:
        res = grid.shape[0] - 1
        x = uu * res
        y = vv * res
        ix = np.minimum(x.astype(np.intp), res - 1)
        iy = np.minimum(y.astype(np.intp), res - 1)
        fx = _smoothstep(x - ix)[..., None]
        fy = _smoothstep(y - iy)[..., None]
        top = grid[iy, ix] * (1 - fx) + grid[iy, ix + 1] * fx
        bot = grid[iy + 1, ix] * (1 - fx) + grid[iy + 1, ix + 1] * fx
        acc += amp * (top * (1 - fy) + bot * fy)
        total += amp
        amp *= _NOISE_PERSISTENCE
    acc /= total
    return np.clip(0.5 + (acc - 0.5) * 1.7, 0.02, 0.98)


@dataclass(frozen=True)
class Scene:
    """Rendered track with ground truth; all pose-space fields are at
    ``spec.scale`` units, while images are scale-free."""

    spec: SceneSpec
    cameras: tuple[Camera, ...]
    images: np.ndarray  # (n_track, H, W, 3)
    depths: np.ndarray | None  # (n_track, H, W) camera-frame z, scaled units
    near: float
    far: float
    planes: tuple[_Plane, ...] = ()
    background: np.ndarray = field(default_factory=lambda: BACKGROUND.copy())

    @property
    def reference_pair(self) -> tuple[int, int]:
        return 0, len(self.cameras) - 1

    @property
    def target_indices(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.cameras) - 1))


def _build_planes(spec: SceneSpec, rng: np.random.Generator, fx: float) -> list[_Plane]:
    planes = []
    n = len(spec.plane_depths)
    half_width_img = spec.image_width / (2.0 * fx)
    for i, (depth, tilt_deg) in enumerate(zip(spec.plane_depths, spec.plane_tilts)):
        theta = np.deg2rad(tilt_deg)
        c, s = np.cos(theta), np.sin(theta)
        rot_y = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        normal = rot_y @ np.array([0.0, 0.0, -1.0])
        e_u = rot_y @ np.array([1.0, 0.0, 0.0])
        e_v = np.array([0.0, 1.0, 0.0])
        frustum_half = depth * half_width_img
        if i == n - 1:
            ext_u = ext_v = np.inf
            offset = np.zeros(2)
        else:
            shrink = 0.40 + 0.35 * i / max(1, n - 1)
            ext_u = frustum_half * shrink * rng.uniform(0.9, 1.1)
            ext_v = frustum_half * shrink * rng.uniform(0.9, 1.1)
            offset = rng.uniform(-0.25, 0.25, 2) * frustum_half
        planes.append(
            _Plane(
                point=np.array([offset[0] if i < n - 1 else 0.0,
                                offset[1] if i < n - 1 else 0.0, depth]),
                normal=normal,
                e_u=e_u,
                e_v=e_v,
                ext_u=float(ext_u),
                ext_v=float(ext_v),
                tile=4.0 * frustum_half,
                mode=spec.texture_mode,
                lattices=_make_lattices(rng, spec.texture_mode),
            )
        )
    return planes


def _render_view(camera: Camera, planes: list[_Plane], far: float) -> tuple[np.ndarray, np.ndarray]:
    origins, dirs = camera_ray_grid(camera)
    img = np.tile(BACKGROUND, (camera.height, camera.width, 1))
    depth = np.full((camera.height, camera.width), far)
    best_z = np.full((camera.height, camera.width), np.inf)
    forward = camera.R[:, 2]
    for plane in planes:
        denom = dirs @ plane.normal
        offset = (plane.point - camera.t) @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offset / denom
        hit = np.isfinite(t) & (t > 0.0)
        points = origins + t[..., None] * dirs
        rel = points - plane.point
        u = rel @ plane.e_u
        v = rel @ plane.e_v
        if np.isfinite(plane.ext_u):
            hit &= (np.abs(u) <= plane.ext_u) & (np.abs(v) <= plane.ext_v)
        z = (points - camera.t) @ forward
        hit &= z < best_z
        if not hit.any():
            continue
        img[hit] = _sample_texture(plane, u[hit], v[hit])
        best_z[hit] = z[hit]
        depth[hit] = z[hit]
    return img, depth


def gen_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic scene synthesis; same (spec, seed) gives bitwise-equal
    output."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.texture_seed]))
    h, w = spec.image_height, spec.image_width
    fx = 0.87 * w
    K = np.array([[fx, 0.0, w / 2.0], [0.0, fx, h / 2.0], [0.0, 0.0, 1.0]])
    planes = _build_planes(spec, rng, fx)

    n = spec.track_count
    xs = (np.arange(n) / (n - 1) - 0.5) * spec.baseline
    cameras_unit = [Camera(K, np.eye(3), np.array([x, 0.0, 0.0]), w, h) for x in xs]
    images = np.empty((n, h, w, 3))
    depths = np.empty((n, h, w))
    for i, cam in enumerate(cameras_unit):
        images[i], depths[i] = _render_view(cam, planes, spec.far)

    s = spec.scale
    cameras = tuple(Camera(K, np.eye(3), cam.t * s, w, h) for cam in cameras_unit)
    return Scene(
        spec=spec,
        cameras=cameras,
        images=images,
        depths=depths * s,
        near=spec.near * s,
        far=spec.far * s,
        planes=tuple(planes),
    )


def texture_raster(scene: Scene, plane_index: int, resolution: int) -> np.ndarray:
    """Plane texture sampled at image-like density: a (resolution,
    resolution, 3) raster of the window one camera sees at the plane center.
    Used by the band-limit diagnostics."""
    plane = scene.planes[plane_index]
    fx = 0.87 * scene.spec.image_width
    half = plane.point[2] * scene.spec.image_width / (2.0 * fx)
    coords = (np.arange(resolution) + 0.5) / resolution * 2.0 * half - half
    u, v = np.meshgrid(coords, coords)
    return _sample_texture(plane, u, v)


def save_scene(scene: Scene, out_dir) -> "Path":
    """Write a posed image directory: per-view raw float images (plus PNG
    copies for viewing), raw depth maps, and a ``scene.json`` index with
    row-major camera matrices."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_names, png_names, depth_names = [], [], []
    for i in range(len(scene.cameras)):
        image_names.append(f"view_{i:03d}.imgf")
        png_names.append(f"view_{i:03d}.png")
        save_raw(out / image_names[-1], scene.images[i])
        save_png(out / png_names[-1], scene.images[i])
        if scene.depths is not None:
            depth_names.append(f"depth_{i:03d}.imgf")
            save_raw(out / depth_names[-1], scene.depths[i])
    doc = {
        "cameras": [
            {
                "K": cam.K.reshape(-1).tolist(),
                "R": cam.R.reshape(-1).tolist(),
                "t": cam.t.tolist(),
                "w": cam.width,
                "h": cam.height,
            }
            for cam in scene.cameras
        ],
        "near": scene.near,
        "far": scene.far,
        "images": image_names,
        "images_png": png_names,
    }
    if depth_names:
        doc["depths"] = depth_names
    path = out / "scene.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def _default_spec_for(w: int, h: int, near: float, far: float, count: int) -> SceneSpec:
    mid = 0.5 * (near + far)
    return SceneSpec(
        plane_depths=(mid,),
        plane_tilts=(0.0,),
        image_height=h,
        image_width=w,
        near=near,
        far=far,
        track_count=max(3, count + (count + 1) % 2),
    )


def load_scene(path, spec: SceneSpec | None = None) -> Scene:
    """Load a posed image directory written by :func:`save_scene` (or any
    directory following the same ``scene.json`` layout; loader stub for
    plugging in real data). Image entries ending in ``.png`` are read as
    8-bit, everything else as raw float."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    doc = json.loads(path.read_text())
    base = path.parent
    cameras = []
    for c in doc["cameras"]:
        cameras.append(
            Camera(
                np.asarray(c["K"], dtype=np.float64).reshape(3, 3),
                np.asarray(c["R"], dtype=np.float64).reshape(3, 3),
                np.asarray(c["t"], dtype=np.float64),
                int(c["w"]),
                int(c["h"]),
            )
        )
    if len(cameras) < 3:
        raise SceneError("scene needs at least 3 views (a pair plus a target)")
    images = []
    for name in doc["images"]:
        p = base / name
        images.append(load_png(p) if p.suffix == ".png" else load_raw(p))
    images = np.stack(images)
    depths = None
    if "depths" in doc:
        depths = np.stack([load_raw(base / name) for name in doc["depths"]])
    near, far = float(doc["near"]), float(doc["far"])
    h, w = images.shape[1:3]
    if spec is None:
        spec = _default_spec_for(w, h, near, far, len(cameras))
    elif (spec.image_height, spec.image_width) != (h, w):
        raise SceneError(
            f"loaded images are {w}x{h}, config expects "
            f"{spec.image_width}x{spec.image_height}"
        )
    return Scene(
        spec=spec,
        cameras=tuple(cameras),
        images=images,
        depths=depths,
        near=near,
        far=far,
    )
