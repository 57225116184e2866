"""Differentiable splatting of 3D Gaussians with an analytic backward pass.

Forward model, per pixel center p = (x + 0.5, y + 0.5), splats sorted by
camera depth (ties broken by input order):

    dx, dy = p - mean2d
    power  = -0.5*((ia*dx)*dx + (ic*dy)*dy) - ib*(dx*dy)   # A = inv(cov2d)
    w      = min(opacity * exp(power), 0.999)
    skip the splat at this pixel when power > 0, w < 1/255, or T < 1e-4
    color += splat_color * (w * T);  depth += view_depth * (w * T);  T *= 1 - w

then color += background * T. The depth channel is the unnormalized sum
above (no background term). The exact expression order matters: the tiled
renderer, the brute-force path, and any oracle must evaluate the same ops in
the same order to be bitwise-comparable, so all paths here share
:func:`_composite_block`.

Projection follows the EWA construction: cov2d = J W Sigma W^T J^T plus a
0.3-pixel isotropic blur floor, where J is the perspective Jacobian at the
camera-frame mean and W the world-to-camera rotation.

The backward pass recomputes the forward per splat footprint, then walks
splats back-to-front maintaining the suffix sum S_i = sum_{j>i} c_j w_j T_j
(+ background * T_final for color), giving

    dC/dw_i = c_i * T_i - S_i / (1 - w_i)

and chains through the projection, covariance factorization, and SH color
(including the view-direction dependence on the mean). Clamps, skips, and
culling are stop-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .gaussians import (
    GaussianPrimitive,
    sh_basis,
    sh_basis_gradient,
    sh_degree,
)
from .geometry import Camera

BLUR_FLOOR = 0.3
W_CLAMP = 0.999
W_SKIP = 1.0 / 255.0
T_STOP = 1e-4
NEAR_CULL = 0.01
CULL_SIGMA = 3.0
# Footprint restriction. w >= 1/255 requires Mahalanobis distance <= 3.33
# sigma even at opacity 1, so a 3.5 sigma box provably contains every pixel
# the per-pixel skip test would keep.
FOOTPRINT_SIGMA = 3.5


class RasterizerError(ValueError):
    pass


@dataclass(frozen=True)
class Splat2D:
    """Screen-space Gaussian: projected mean, 2D covariance, depth, color."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    color: np.ndarray
    opacity: float
    index: int


@dataclass(frozen=True)
class RenderedImage:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), unnormalized weighted sum
    counts: np.ndarray  # (H, W) int, contributing splats per pixel


@dataclass(frozen=True)
class RenderGradients:
    mean: np.ndarray  # (N, 3)
    scale_raw: np.ndarray  # (N, 3)
    rotation_raw: np.ndarray  # (N, 4)
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)


def _primitive_arrays(primitives) -> tuple[np.ndarray, ...]:
    if not primitives:
        raise RasterizerError("need at least one primitive")
    k = primitives[0].sh.shape[0]
    if any(p.sh.shape[0] != k for p in primitives):
        raise RasterizerError("all primitives must share one SH degree")
    means = np.stack([p.mean for p in primitives])
    scale_raw = np.stack([p.scale_raw for p in primitives])
    rotation_raw = np.stack([p.rotation_raw for p in primitives])
    opacity = np.array([p.opacity for p in primitives])
    sh = np.stack([p.sh for p in primitives])
    return means, scale_raw, rotation_raw, opacity, sh


@dataclass
class _Projected:
    """Vectorized projection products for the splats that survived culling."""

    kept: np.ndarray  # indices into the input arrays, already depth-sorted
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2)
    inv_a: np.ndarray  # inverse covariance entries (M,)
    inv_b: np.ndarray
    inv_c: np.ndarray
    z: np.ndarray  # camera-frame depth (M,)
    color: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    bbox: np.ndarray  # (M, 4) int: x0, x1, y0, y1 inclusive pixel range
    # intermediates for the backward chain
    t_cam: np.ndarray  # (M, 3)
    J: np.ndarray  # (M, 2, 3)
    M: np.ndarray  # (M, 2, 3) = J @ W
    Sigma: np.ndarray  # (M, 3, 3)
    R_q: np.ndarray  # (M, 3, 3)
    s_axes: np.ndarray  # (M, 3) exp(scale_raw)
    q_unit: np.ndarray  # (M, 4)
    q_norm: np.ndarray  # (M,)
    view_dir: np.ndarray  # (M, 3)
    view_dist: np.ndarray  # (M,)
    basis: np.ndarray  # (M, K)
    color_pre: np.ndarray  # (M, 3) before the non-negativity clamp


def _quat_rotations(rotation_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rotation_raw, axis=1)
    if np.any(norms < 1e-12):
        raise RasterizerError("rotation_raw has (near-)zero norm")
    q = rotation_raw / norms[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R, q, norms


def _project_arrays(
    camera: Camera,
    means: np.ndarray,
    scale_raw: np.ndarray,
    rotation_raw: np.ndarray,
    opacity: np.ndarray,
    sh: np.ndarray,
) -> _Projected:
    n = means.shape[0]
    degree = sh_degree(sh.shape[1])
    W = camera.R.T
    t_cam = (means - camera.t) @ camera.R
    z = t_cam[:, 2]
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    s_axes = np.exp(scale_raw)
    R_q, q_unit, q_norm = _quat_rotations(rotation_raw)

    # Behind-camera splats produce non-finite intermediates here; they are
    # dropped by the cull below, so suppress the transient warnings.
    with np.errstate(all="ignore"):
        px = fx * t_cam[:, 0] / z + cx
        py = fy * t_cam[:, 1] / z + cy
        mean2d = np.stack([px, py], axis=1)

        M3 = R_q * s_axes[:, None, :]
        Sigma = M3 @ M3.transpose(0, 2, 1)

        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * t_cam[:, 0] / (z * z)
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * t_cam[:, 1] / (z * z)
        M = J @ W
        cov2d = M @ Sigma @ M.transpose(0, 2, 1)
        cov2d[:, 0, 0] += BLUR_FLOOR
        cov2d[:, 1, 1] += BLUR_FLOOR

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(np.square(0.5 * (a - c)) + b * b)
        radius_cull = CULL_SIGMA * np.sqrt(lam_max)
        on_image = (
            (mean2d[:, 0] + radius_cull > 0.0)
            & (mean2d[:, 0] - radius_cull < camera.width)
            & (mean2d[:, 1] + radius_cull > 0.0)
            & (mean2d[:, 1] - radius_cull < camera.height)
        )
        keep = (z > NEAR_CULL) & on_image
        kept = np.nonzero(keep)[0]
        # Depth sort with input order breaking ties.
        order = np.lexsort((kept, z[kept]))
        kept = kept[order]

        det = a * c - b * b
        inv_a = c / det
        inv_b = -b / det
        inv_c = a / det

        # View-dependent color (view direction depends on the mean).
        offset = means - camera.t
        view_dist = np.linalg.norm(offset, axis=1)
        view_dir = offset / view_dist[:, None]
        basis = sh_basis(view_dir, degree)
        color_pre = 0.5 + np.einsum("nk,nkc->nc", basis, sh)
        color = np.maximum(0.0, color_pre)

    # Footprint bounding box over pixel centers, on survivors only (finite).
    radius = FOOTPRINT_SIGMA * np.sqrt(lam_max[kept])
    kx, ky = mean2d[kept, 0], mean2d[kept, 1]
    x0 = np.maximum(0, np.ceil(kx - radius - 0.5)).astype(np.int64)
    x1 = np.minimum(camera.width - 1, np.floor(kx + radius - 0.5)).astype(np.int64)
    y0 = np.maximum(0, np.ceil(ky - radius - 0.5)).astype(np.int64)
    y1 = np.minimum(camera.height - 1, np.floor(ky + radius - 0.5)).astype(np.int64)
    bbox = np.stack([x0, x1, y0, y1], axis=1)

    def sel(arr: np.ndarray) -> np.ndarray:
        return arr[kept]
    return _Projected(
        kept=kept,
        mean2d=sel(mean2d),
        cov2d=sel(cov2d),
        inv_a=sel(inv_a),
        inv_b=sel(inv_b),
        inv_c=sel(inv_c),
        z=sel(z),
        color=sel(color),
        opacity=opacity[kept],
        bbox=bbox,
        t_cam=sel(t_cam),
        J=sel(J),
        M=sel(M),
        Sigma=sel(Sigma),
        R_q=sel(R_q),
        s_axes=sel(s_axes),
        q_unit=sel(q_unit),
        q_norm=sel(q_norm),
        view_dir=sel(view_dir),
        view_dist=sel(view_dist),
        basis=sel(basis),
        color_pre=sel(color_pre),
    )


def project_gaussian(camera: Camera, primitive: GaussianPrimitive) -> Splat2D | None:
    """Project one primitive; None when depth- or extent-culled."""
    proj = _project_arrays(
        camera,
        primitive.mean[None],
        primitive.scale_raw[None],
        primitive.rotation_raw[None],
        np.array([primitive.opacity]),
        primitive.sh[None],
    )
    if proj.kept.size == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        view_depth=float(proj.z[0]),
        color=proj.color[0],
        opacity=float(proj.opacity[0]),
        index=0,
    )


def _composite_block(
    C: np.ndarray,
    D: np.ndarray,
    T: np.ndarray,
    counts: np.ndarray,
    proj: _Projected,
    i: int,
    x0: int,
    x1: int,
    y0: int,
    y1: int,
    record: bool,
):
    """Composite splat i onto the inclusive pixel block; all paths share this."""
    xs = (np.arange(x0, x1 + 1) + 0.5)[None, :]
    ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
    mx, my = proj.mean2d[i]
    ia, ib, ic = proj.inv_a[i], proj.inv_b[i], proj.inv_c[i]
    dx = xs - mx
    dy = ys - my
    power = -0.5 * ((ia * dx) * dx + (ic * dy) * dy) - ib * (dx * dy)
    w = np.minimum(proj.opacity[i] * np.exp(power), W_CLAMP)
    sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    T_block = T[sl]
    m = (power <= 0.0) & (w >= W_SKIP) & (T_block >= T_STOP)
    w_eff = np.where(m, w, 0.0)
    saved = (w_eff, T_block.copy(), m & (proj.opacity[i] * np.exp(power) <= W_CLAMP)) if record else None
    f = np.where(m, w * T_block, 0.0)
    C[sl] += f[:, :, None] * proj.color[i][None, None, :]
    D[sl] += f * proj.z[i]
    counts[sl] += m
    T[sl] = T_block * (1.0 - w_eff)
    return saved


def _finish(C, D, T, counts, background) -> RenderedImage:
    C = C + background[None, None, :] * T[:, :, None]
    return RenderedImage(color=C, alpha=1.0 - T, depth=D, counts=counts)


def render_arrays(
    camera: Camera,
    means: np.ndarray,
    scale_raw: np.ndarray,
    rotation_raw: np.ndarray,
    opacity: np.ndarray,
    sh: np.ndarray,
    background: np.ndarray,
) -> RenderedImage:
    """Reference path: every splat composited over its footprint, depth order."""
    proj = _project_arrays(camera, means, scale_raw, rotation_raw, opacity, sh)
    h, w = camera.height, camera.width
    C = np.zeros((h, w, 3))
    D = np.zeros((h, w))
    T = np.ones((h, w))
    counts = np.zeros((h, w), dtype=np.int64)
    for i in range(proj.kept.size):
        x0, x1, y0, y1 = proj.bbox[i]
        if x0 > x1 or y0 > y1:
            continue
        _composite_block(C, D, T, counts, proj, i, x0, x1, y0, y1, record=False)
    return _finish(C, D, T, counts, np.asarray(background, dtype=np.float64))


def render(camera: Camera, primitives, background) -> RenderedImage:
    return render_arrays(camera, *_primitive_arrays(primitives), background=background)


def render_tiled(camera: Camera, primitives, background, tile_size: int = 16) -> RenderedImage:
    """Tile-bucketed compositing; bitwise-equal to :func:`render` by construction."""
    means, scale_raw, rotation_raw, opacity, sh = _primitive_arrays(primitives)
    proj = _project_arrays(camera, means, scale_raw, rotation_raw, opacity, sh)
    h, w = camera.height, camera.width
    C = np.zeros((h, w, 3))
    D = np.zeros((h, w))
    T = np.ones((h, w))
    counts = np.zeros((h, w), dtype=np.int64)

    n_ty = (h + tile_size - 1) // tile_size
    n_tx = (w + tile_size - 1) // tile_size
    tiles: list[list[int]] = [[] for _ in range(n_ty * n_tx)]
    for i in range(proj.kept.size):
        x0, x1, y0, y1 = proj.bbox[i]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile_size, y1 // tile_size + 1):
            for tx in range(x0 // tile_size, x1 // tile_size + 1):
                tiles[ty * n_tx + tx].append(i)

    for ty in range(n_ty):
        ty0 = ty * tile_size
        ty1 = min(h - 1, ty0 + tile_size - 1)
        for tx in range(n_tx):
            tx0 = tx * tile_size
            tx1 = min(w - 1, tx0 + tile_size - 1)
            for i in tiles[ty * n_tx + tx]:
                x0, x1, y0, y1 = proj.bbox[i]
                _composite_block(
                    C,
                    D,
                    T,
                    counts,
                    proj,
                    i,
                    max(x0, tx0),
                    min(x1, tx1),
                    max(y0, ty0),
                    min(y1, ty1),
                    record=False,
                )
    return _finish(C, D, T, counts, np.asarray(background, dtype=np.float64))


def render_backward_arrays(
    camera: Camera,
    means: np.ndarray,
    scale_raw: np.ndarray,
    rotation_raw: np.ndarray,
    opacity: np.ndarray,
    sh: np.ndarray,
    background: np.ndarray,
    grad_color: np.ndarray,
    grad_depth: np.ndarray | None = None,
) -> RenderGradients:
    """Exact cotangents of render_arrays for the given output gradients."""
    n = means.shape[0]
    proj = _project_arrays(camera, means, scale_raw, rotation_raw, opacity, sh)
    h, w = camera.height, camera.width
    background = np.asarray(background, dtype=np.float64)
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (h, w, 3):
        raise RasterizerError(f"grad_color must have shape {(h, w, 3)}, got {grad_color.shape}")
    gD_img = np.zeros((h, w)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)

    # Forward replay, recording each splat's weights and entry transmittance.
    C = np.zeros((h, w, 3))
    D = np.zeros((h, w))
    T = np.ones((h, w))
    counts = np.zeros((h, w), dtype=np.int64)
    records: list[tuple[int, int, int, int, int, tuple]] = []
    for i in range(proj.kept.size):
        x0, x1, y0, y1 = proj.bbox[i]
        if x0 > x1 or y0 > y1:
            continue
        saved = _composite_block(C, D, T, counts, proj, i, x0, x1, y0, y1, record=True)
        records.append((i, x0, x1, y0, y1, saved))

    m_count = proj.kept.size
    g_mean2d = np.zeros((m_count, 2))
    g_cov = np.zeros((m_count, 2, 2))
    g_color = np.zeros((m_count, 3))
    g_z = np.zeros(m_count)
    g_alpha_kept = np.zeros(m_count)

    # Suffix sums: color includes the background term, depth has none.
    S = background[None, None, :] * T[:, :, None]
    S_d = np.zeros((h, w))
    for i, x0, x1, y0, y1, (w_eff, T_in, open_mask) in reversed(records):
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        m = w_eff > 0.0
        if not m.any():
            continue
        f = w_eff * T_in
        gC = grad_color[sl]
        gD = gD_img[sl]
        color_i = proj.color[i]
        z_i = proj.z[i]
        g_color[i] = np.einsum("yxc,yx->c", gC, f)
        g_z[i] = float((gD * f).sum())

        one_minus = 1.0 - w_eff
        dw = np.einsum("yxc,c->yx", gC, color_i) * T_in - np.einsum("yxc,yxc->yx", gC, S[sl]) / one_minus
        dw += gD * (z_i * T_in - S_d[sl] / one_minus)
        dw = np.where(m, dw, 0.0)

        # Chain w = alpha * g through the clamp stop-gradient.
        dw_open = np.where(open_mask, dw, 0.0)
        alpha_i = proj.opacity[i]
        g_gauss = w_eff / alpha_i if alpha_i > 0 else np.zeros_like(w_eff)  # exp(power) at kept pixels
        g_alpha_kept[i] = float((dw_open * g_gauss).sum())
        dpower = dw_open * alpha_i * g_gauss

        xs = (np.arange(x0, x1 + 1) + 0.5)[None, :]
        ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        mx, my = proj.mean2d[i]
        dx = xs - mx
        dy = ys - my
        ia, ib, ic = proj.inv_a[i], proj.inv_b[i], proj.inv_c[i]
        g_mean2d[i, 0] = float((dpower * (ia * dx + ib * dy)).sum())
        g_mean2d[i, 1] = float((dpower * (ic * dy + ib * dx)).sum())
        ga = -0.5 * float((dpower * dx * dx).sum())
        gb = -float((dpower * dx * dy).sum())
        gc = -0.5 * float((dpower * dy * dy).sum())
        # d(power)/dA for symmetric A, then dL/dcov = -A GA A.
        GA = np.array([[ga, 0.5 * gb], [0.5 * gb, gc]])
        A = np.array([[ia, ib], [ib, ic]])
        g_cov[i] = -A @ GA @ A

        S[sl] = S[sl] + (f[:, :, None] * color_i[None, None, :])
        S_d[sl] = S_d[sl] + f * z_i

    # Vectorized chain from per-splat screen gradients to primitive parameters.
    g_mean_out = np.zeros((n, 3))
    g_scale_out = np.zeros((n, 3))
    g_rot_out = np.zeros((n, 4))
    g_alpha_out = np.zeros(n)
    g_sh_out = np.zeros_like(sh)
    if m_count:
        W = camera.R.T
        fx, fy = camera.fx, camera.fy
        tx, ty_, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]

        GC = 0.5 * (g_cov + g_cov.transpose(0, 2, 1))
        gM = 2.0 * np.einsum("nij,njk,nkl->nil", GC, proj.M, proj.Sigma)
        gSigma = np.einsum("nji,njk,nkl->nil", proj.M, GC, proj.M)
        gJ = np.einsum("nij,kj->nik", gM, W)

        g_t = np.einsum("nji,nj->ni", proj.J, g_mean2d)
        g_t[:, 2] += g_z
        inv_z2 = 1.0 / (tz * tz)
        g_t[:, 0] += gJ[:, 0, 2] * (-fx * inv_z2)
        g_t[:, 1] += gJ[:, 1, 2] * (-fy * inv_z2)
        g_t[:, 2] += (
            gJ[:, 0, 0] * (-fx * inv_z2)
            + gJ[:, 1, 1] * (-fy * inv_z2)
            + gJ[:, 0, 2] * (2.0 * fx * tx / (tz**3))
            + gJ[:, 1, 2] * (2.0 * fy * ty_ / (tz**3))
        )
        g_mean = g_t @ camera.R.T

        # Sigma = (R_q S)(R_q S)^T.
        GS = 0.5 * (gSigma + gSigma.transpose(0, 2, 1))
        M3 = proj.R_q * proj.s_axes[:, None, :]
        gM3 = 2.0 * np.einsum("nij,njk->nik", GS, M3)
        gRq = gM3 * proj.s_axes[:, None, :]
        gs = np.einsum("nij,nij->nj", gM3, proj.R_q)
        g_scale = gs * proj.s_axes

        qw, qx, qy, qz = proj.q_unit[:, 0], proj.q_unit[:, 1], proj.q_unit[:, 2], proj.q_unit[:, 3]
        zeros = np.zeros_like(qw)
        dR = np.empty((m_count, 4, 3, 3))
        dR[:, 0] = 2.0 * np.stack(
            [
                np.stack([zeros, -qz, qy], -1),
                np.stack([qz, zeros, -qx], -1),
                np.stack([-qy, qx, zeros], -1),
            ],
            -2,
        )
        dR[:, 1] = 2.0 * np.stack(
            [
                np.stack([zeros, qy, qz], -1),
                np.stack([qy, -2 * qx, -qw], -1),
                np.stack([qz, qw, -2 * qx], -1),
            ],
            -2,
        )
        dR[:, 2] = 2.0 * np.stack(
            [
                np.stack([-2 * qy, qx, qw], -1),
                np.stack([qx, zeros, qz], -1),
                np.stack([-qw, qz, -2 * qy], -1),
            ],
            -2,
        )
        dR[:, 3] = 2.0 * np.stack(
            [
                np.stack([-2 * qz, -qw, qx], -1),
                np.stack([qw, -2 * qz, qy], -1),
                np.stack([qx, qy, zeros], -1),
            ],
            -2,
        )
        gq_unit = np.einsum("nij,nkij->nk", gRq, dR)
        q_dot = np.einsum("nk,nk->n", proj.q_unit, gq_unit)
        g_rot = (gq_unit - proj.q_unit * q_dot[:, None]) / proj.q_norm[:, None]

        # SH color: clamp is a stop-gradient; view direction feeds the mean.
        clamp_mask = proj.color_pre > 0.0
        gc_m = g_color * clamp_mask
        g_sh = proj.basis[:, :, None] * gc_m[:, None, :]
        degree = sh_degree(sh.shape[1])
        dbasis = sh_basis_gradient(proj.view_dir, degree)
        wts = np.einsum("nkc,nc->nk", sh[proj.kept], gc_m)
        gdir = np.einsum("nk,nkd->nd", wts, dbasis)
        vdot = np.einsum("nd,nd->n", proj.view_dir, gdir)
        g_mean += (gdir - proj.view_dir * vdot[:, None]) / proj.view_dist[:, None]

        g_mean_out[proj.kept] = g_mean
        g_scale_out[proj.kept] = g_scale
        g_rot_out[proj.kept] = g_rot
        g_alpha_out[proj.kept] = g_alpha_kept
        g_sh_out[proj.kept] = g_sh

    return RenderGradients(
        mean=g_mean_out,
        scale_raw=g_scale_out,
        rotation_raw=g_rot_out,
        opacity=g_alpha_out,
        sh=g_sh_out,
    )


def render_backward(
    camera: Camera,
    primitives,
    background,
    grad_color: np.ndarray,
    grad_depth: np.ndarray | None = None,
) -> RenderGradients:
    means, scale_raw, rotation_raw, opacity, sh = _primitive_arrays(primitives)
    return render_backward_arrays(
        camera, means, scale_raw, rotation_raw, opacity, sh,
        np.asarray(background, dtype=np.float64), grad_color, grad_depth,
    )


def render_value(
    camera: Camera,
    means: autodiff.Value,
    scale_raw: autodiff.Value,
    rotation_raw: autodiff.Value,
    opacity: autodiff.Value,
    sh: autodiff.Value,
    background: np.ndarray,
) -> autodiff.Value:
    """Autodiff node producing (H, W, 4): color channels then the depth channel."""
    background = np.asarray(background, dtype=np.float64)

    def forward(me, sc, ro, op, sh_arr):
        img = render_arrays(camera, me, sc, ro, op, sh_arr, background)
        return np.concatenate([img.color, img.depth[:, :, None]], axis=2)

    def vjp(g):
        grads = render_backward_arrays(
            camera,
            means.data,
            scale_raw.data,
            rotation_raw.data,
            opacity.data,
            sh.data,
            background,
            grad_color=g[:, :, :3],
            grad_depth=g[:, :, 3],
        )
        return (grads.mean, grads.scale_raw, grads.rotation_raw, grads.opacity, grads.sh)

    return autodiff.custom_node(
        [means, scale_raw, rotation_raw, opacity, sh], forward, vjp, name="render"
    )
