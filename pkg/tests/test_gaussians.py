"""Gaussian primitive parameterization and spherical-harmonic color.

The SH oracle recomputes every basis constant from its closed form
(1/(2 sqrt(pi)) and friends) rather than reusing the module constants, and
the covariance oracle checks eigenstructure instead of re-running the same
matrix product.
"""

import math

import numpy as np
import pytest

from stereosplat.gaussians import (
    GaussianError,
    GaussianPrimitive,
    build_covariance,
    eval_sh,
    quaternion_to_rotation,
    sh_basis,
    sh_basis_gradient,
    sh_coefficient_count,
    sh_degree,
    unproject,
)
from stereosplat.geometry import GeometryError, Ray


def sh_oracle(v: np.ndarray) -> np.ndarray:
    """All nine degree-2 basis values from first-principles constants."""
    x, y, z = v
    c0 = 1.0 / (2.0 * math.sqrt(math.pi))
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    c2_xy = 0.5 * math.sqrt(15.0 / math.pi)
    c2_z2 = 0.25 * math.sqrt(5.0 / math.pi)
    c2_x2y2 = 0.25 * math.sqrt(15.0 / math.pi)
    return np.array(
        [
            c0,
            -c1 * y,
            c1 * z,
            -c1 * x,
            c2_xy * x * y,
            -c2_xy * y * z,
            c2_z2 * (2 * z * z - x * x - y * y),
            -c2_xy * x * z,
            c2_x2y2 * (x * x - y * y),
        ]
    )


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


class TestShBasis:
    def test_matches_first_principles_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            v = random_unit(rng)
            np.testing.assert_allclose(sh_basis(v, 2), sh_oracle(v), atol=1e-14)

    def test_lower_degrees_are_prefixes(self):
        v = random_unit(np.random.default_rng(9))
        full = sh_basis(v, 2)
        np.testing.assert_array_equal(sh_basis(v, 0), full[:1])
        np.testing.assert_array_equal(sh_basis(v, 1), full[:4])

    def test_batched_shape(self):
        dirs = np.stack([random_unit(np.random.default_rng(s)) for s in range(6)])
        assert sh_basis(dirs, 1).shape == (6, 4)
        assert sh_basis(dirs.reshape(2, 3, 3), 2).shape == (2, 3, 9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        h = 1e-6
        for degree in (0, 1, 2):
            v = random_unit(rng)
            grad = sh_basis_gradient(v, degree)
            for axis in range(3):
                dv = np.zeros(3)
                dv[axis] = h
                fd = (sh_basis(v + dv, degree) - sh_basis(v - dv, degree)) / (2 * h)
                np.testing.assert_allclose(grad[:, axis], fd, atol=1e-8)

    def test_coefficient_count_round_trip(self):
        for degree in (0, 1, 2):
            assert sh_degree(sh_coefficient_count(degree)) == degree
        with pytest.raises(GaussianError):
            sh_degree(5)
        with pytest.raises(GaussianError):
            sh_degree(16)


class TestEvalSh:
    def test_dc_only_is_constant_over_directions(self):
        sh = np.zeros((1, 3))
        sh[0] = [0.2, 0.5, 1.1]
        rng = np.random.default_rng(17)
        expected = np.maximum(0.0, 0.5 + sh[0] / (2.0 * math.sqrt(math.pi)))
        for _ in range(10):
            np.testing.assert_allclose(eval_sh(sh, random_unit(rng)), expected, atol=1e-14)

    def test_degree_one_view_dependence(self):
        sh = np.zeros((4, 3))
        sh[3, 0] = 1.0  # the -C1*x basis slot of the red channel
        c1 = math.sqrt(3.0 / (4.0 * math.pi))
        got = eval_sh(sh, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(got, [max(0.0, 0.5 - c1), 0.5, 0.5], atol=1e-14)

    def test_negative_colors_clamped(self):
        sh = np.full((1, 3), -10.0)
        np.testing.assert_array_equal(eval_sh(sh, np.array([0.0, 0.0, 1.0])), np.zeros(3))

    def test_non_unit_direction_rejected(self):
        with pytest.raises(GaussianError):
            eval_sh(np.zeros((1, 3)), np.array([1.0, 1.0, 0.0]))


class TestQuaternionRotation:
    def test_identity(self):
        np.testing.assert_allclose(
            quaternion_to_rotation([1.0, 0.0, 0.0, 0.0]), np.eye(3), atol=1e-15
        )

    def test_quarter_turn_about_z(self):
        s = math.sqrt(0.5)
        R = quaternion_to_rotation([s, 0.0, 0.0, s])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(R, expected, atol=1e-15)

    def test_always_special_orthogonal(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            R = quaternion_to_rotation(rng.normal(size=4))
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(25)
        q = rng.normal(size=4)
        np.testing.assert_allclose(
            quaternion_to_rotation(q), quaternion_to_rotation(3.7 * q), atol=1e-14
        )

    def test_zero_quaternion_rejected(self):
        with pytest.raises(GaussianError):
            quaternion_to_rotation(np.zeros(4))


class TestCovariance:
    def test_eigenstructure(self):
        """Eigenvalues are exp(2*scale_raw) and eigenvectors the quaternion
        rotation's columns."""
        rng = np.random.default_rng(29)
        for _ in range(50):
            scale_raw = rng.uniform(-2.0, 1.0, 3)
            q = rng.normal(size=4)
            cov = build_covariance(scale_raw, q)
            np.testing.assert_allclose(cov, cov.T, atol=1e-15)
            eigvals = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(
                eigvals, np.sort(np.exp(2.0 * scale_raw)), rtol=1e-10
            )
            R = quaternion_to_rotation(q)
            for axis in range(3):
                v = R[:, axis]
                np.testing.assert_allclose(
                    cov @ v, np.exp(2.0 * scale_raw[axis]) * v, atol=1e-10
                )

    def test_isotropic_case(self):
        cov = build_covariance(np.log([0.5, 0.5, 0.5]), [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(cov, 0.25 * np.eye(3), atol=1e-15)


class TestPrimitiveValidation:
    def _valid_kwargs(self):
        return dict(
            mean=np.zeros(3),
            scale_raw=np.zeros(3),
            rotation_raw=np.array([1.0, 0.0, 0.0, 0.0]),
            opacity=0.5,
            sh=np.zeros((4, 3)),
        )

    def test_accepts_valid(self):
        p = GaussianPrimitive(**self._valid_kwargs())
        assert p.degree == 1

    def test_rejects_opacity_outside_unit_interval(self):
        for bad in (-0.1, 1.5):
            kwargs = self._valid_kwargs() | {"opacity": bad}
            with pytest.raises(GaussianError):
                GaussianPrimitive(**kwargs)

    def test_rejects_bad_sh_row_count(self):
        kwargs = self._valid_kwargs() | {"sh": np.zeros((3, 3))}
        with pytest.raises(GaussianError):
            GaussianPrimitive(**kwargs)

    def test_rejects_zero_rotation(self):
        kwargs = self._valid_kwargs() | {"rotation_raw": np.zeros(4)}
        with pytest.raises(GaussianError):
            GaussianPrimitive(**kwargs)


class TestUnproject:
    def test_matches_ray_at(self):
        ray = Ray(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_array_equal(unproject(ray, 4.5), ray.at(4.5))

    def test_rejects_nonpositive_depth(self):
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(GeometryError):
            unproject(ray, 0.0)
