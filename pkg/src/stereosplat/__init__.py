"""Two-view 3D Gaussian splat reconstruction with an analytic renderer.

The package is organized bottom-up: :mod:`stereosplat.geometry` (cameras,
rays, epipolar sampling), :mod:`stereosplat.gaussians` (primitive
parameterization and spherical harmonics), :mod:`stereosplat.autodiff`
(reverse-mode engine and Adam), :mod:`stereosplat.rasterizer`
(differentiable splatting), :mod:`stereosplat.encoder` (epipolar
cross-attention features), :mod:`stereosplat.head` (probabilistic
pixel-aligned Gaussian prediction), and :mod:`stereosplat.harness`
(scenes, training, evaluation, CLI).
"""

__version__ = "0.1.0"
