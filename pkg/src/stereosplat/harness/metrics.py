"""Image quality metrics and the edge-aware depth smoothness penalty."""

from __future__ import annotations

import numpy as np

from .. import autodiff
from ..autodiff import Value

PSNR_CAP = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
TV_EDGE_SHARPNESS = 30.0


class MetricError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1], capped at 99 dB for exact
    matches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean(np.square(a - b)))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _ssim_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA * _SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    kernel = _ssim_kernel()
    win = (_SSIM_WINDOW, _SSIM_WINDOW)

    def filt(img: np.ndarray) -> np.ndarray:
        windows = np.lib.stride_tricks.sliding_window_view(img, win)
        return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = _SSIM_K1 * _SSIM_K1
    c2 = _SSIM_K2 * _SSIM_K2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity, Gaussian-weighted 11x11 windows with
    sigma 1.5, data range 1; multichannel images average per-channel SSIM.
    Only windows fully inside the image contribute."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise MetricError(f"images smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    if a.ndim == 2:
        return _ssim_single(a, b)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))
    raise MetricError(f"expected 2-d or 3-d images, got shape {a.shape}")


def _edge_weights(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gray_dx = np.abs(np.diff(image, axis=1)).mean(axis=2)
    gray_dy = np.abs(np.diff(image, axis=0)).mean(axis=2)
    return np.exp(-TV_EDGE_SHARPNESS * gray_dx), np.exp(-TV_EDGE_SHARPNESS * gray_dy)


def tv_depth_regularizer(depth: Value, image: np.ndarray) -> Value:
    """Edge-aware total variation: sum |d depth| * exp(-k |d image|) over
    horizontal and vertical forward differences."""
    h, w = depth.data.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (h, w, 3):
        raise MetricError(f"image {image.shape} does not match depth {depth.data.shape}")
    wx, wy = _edge_weights(image)
    dx = autodiff.absolute(
        autodiff.slice_(depth, (slice(None), slice(1, None)))
        - autodiff.slice_(depth, (slice(None), slice(None, -1)))
    )
    dy = autodiff.absolute(
        autodiff.slice_(depth, (slice(1, None), slice(None)))
        - autodiff.slice_(depth, (slice(None, -1), slice(None)))
    )
    return autodiff.sum_(dx * wx) + autodiff.sum_(dy * wy)


def tv_energy(depth: np.ndarray, image: np.ndarray) -> float:
    """Plain-array version of :func:`tv_depth_regularizer` for reports."""
    depth = np.asarray(depth, dtype=np.float64)
    wx, wy = _edge_weights(np.asarray(image, dtype=np.float64))
    dx = np.abs(np.diff(depth, axis=1))
    dy = np.abs(np.diff(depth, axis=0))
    return float((dx * wx).sum() + (dy * wy).sum())
