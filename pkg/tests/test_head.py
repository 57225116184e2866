"""Probabilistic Gaussian head.

Bucket geometry is pinned against the closed-form disparity spacing
(including the 1/((1 - 2/4)(1 - 1/100) + 1/100) spot value), the sampling
reparameterization is checked for exact opacity coupling, and the full
softmax -> gather -> render -> loss chain is finite-difference checked with
the sampled bucket frozen.
"""

import numpy as np
import pytest

import stereosplat.autodiff as ad
from stereosplat.autodiff import Value, backward
from stereosplat.head import (
    BatchedPrediction,
    DepthBuckets,
    GaussianBatch,
    HeadConfig,
    HeadError,
    batch_primitives,
    gaussians_from_prediction,
    init_head_params,
    make_buckets,
    output_dimension,
    pixel_gaussian,
    predict,
    predict_batch,
    regress_depth_baseline,
    regression_gaussians,
    reparameterized_opacity,
    sample_depth,
)
from stereosplat.gaussians import GaussianPrimitive
from stereosplat.geometry import Ray

from _support import make_camera


class TestBuckets:
    def test_spot_value(self):
        buckets = make_buckets(1.0, 100.0, 4)
        assert buckets.depths[2] == 1.9801980198019802

    def test_endpoints(self):
        buckets = make_buckets(1.0, 100.0, 8)
        assert buckets.depths[0] == 1.0
        # The virtual boundary above the last bucket is far itself.
        assert buckets.depths[-1] + buckets.widths[-1] == 100.0

    def test_uniform_in_reciprocal_depth(self):
        for near, far, z in [(1.0, 100.0, 4), (0.5, 12.0, 33), (2.0, 3.0, 7)]:
            buckets = make_buckets(near, far, z)
            gaps = np.diff(1.0 / buckets.depths)
            np.testing.assert_allclose(gaps, gaps[0], rtol=1e-12)

    def test_monotone_with_positive_widths(self):
        buckets = make_buckets(0.8, 50.0, 16)
        assert (np.diff(buckets.depths) > 0).all()
        assert (buckets.widths > 0).all()
        assert buckets.count == 16

    def test_validation(self):
        with pytest.raises(HeadError):
            make_buckets(2.0, 1.0, 4)
        with pytest.raises(HeadError):
            make_buckets(1.0, 2.0, 1)


class TestLayout:
    def test_output_dimension(self):
        assert output_dimension(HeadConfig(z_count=64, sh_degree=1)) == 128 + 3 + 4 + 12 + 2
        assert output_dimension(HeadConfig(z_count=16, sh_degree=2)) == 32 + 3 + 4 + 27 + 2

    def test_zero_feature_hits_initialization_biases(self):
        """A zero feature vector reads the final bias directly: uniform phi,
        centered offsets, identity rotation, the provided scale bias, and
        midpoint logits."""
        config = HeadConfig(z_count=8, hidden=16, sh_degree=1)
        params = init_head_params(config, 6, np.random.default_rng(0), scale_bias=-1.5)
        out = predict(np.zeros(6), params, config)
        np.testing.assert_allclose(out.phi.data, np.full(8, 1 / 8), rtol=1e-15)
        np.testing.assert_array_equal(out.delta.data, np.full(8, 0.5))
        np.testing.assert_array_equal(out.scale_raw.data, np.full(3, -1.5))
        np.testing.assert_array_equal(out.rotation_raw.data, [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(out.sh.data, np.zeros((4, 3)))
        assert out.depth_logit.data == 0.0 and out.opacity_logit.data == 0.0

    def test_feature_dimension_validated(self):
        config = HeadConfig(z_count=4, hidden=8)
        params = init_head_params(config, 6, np.random.default_rng(1), scale_bias=0.0)
        with pytest.raises(HeadError):
            predict_batch(Value(np.zeros((3, 9))), params, config)
        with pytest.raises(HeadError):
            predict(np.zeros((2, 6)), params, config)


class TestSampling:
    def test_deterministic_under_seed(self):
        phi = np.array([0.25, 0.25, 0.5])
        draws_a = [sample_depth(phi, np.random.default_rng(7)) for _ in range(5)]
        draws_b = [sample_depth(phi, np.random.default_rng(7)) for _ in range(5)]
        assert draws_a == draws_b

    def test_one_hot_always_selected(self):
        rng = np.random.default_rng(9)
        phi = np.zeros(6)
        phi[4] = 1.0
        assert all(sample_depth(phi, rng) == 4 for _ in range(50))

    def test_frequencies_match_distribution(self):
        """20k draws stay within four binomial standard errors per bucket."""
        phi = np.array([0.1, 0.2, 0.3, 0.4])
        rng = np.random.default_rng(11)
        n = 20_000
        counts = np.bincount([sample_depth(phi, rng) for _ in range(n)], minlength=4)
        for k in range(4):
            sigma = np.sqrt(phi[k] * (1 - phi[k]) / n)
            assert abs(counts[k] / n - phi[k]) < 4 * sigma

    def test_invalid_distribution_rejected(self):
        rng = np.random.default_rng(13)
        with pytest.raises(HeadError):
            sample_depth(np.array([0.5, 0.6]), rng)
        with pytest.raises(HeadError):
            sample_depth(np.array([-0.1, 1.1]), rng)

    def test_opacity_is_exactly_the_picked_probability(self):
        phi = Value(np.array([0.1, 0.7, 0.2]))
        alpha = reparameterized_opacity(phi, 1)
        assert alpha.data == phi.data[1]
        backward(alpha)
        np.testing.assert_array_equal(phi.grad, [0.0, 1.0, 0.0])

    def test_bucket_index_bounds(self):
        with pytest.raises(HeadError):
            reparameterized_opacity(Value(np.array([1.0, 0.0])), 2)


def manual_prediction(phi, delta, z_count):
    n = phi.shape[0]
    return BatchedPrediction(
        phi=Value(phi),
        delta=Value(delta),
        scale_raw=Value(np.full((n, 3), -1.0)),
        rotation_raw=Value(np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))),
        sh=Value(np.zeros((n, 1, 3))),
        depth_logit=Value(np.zeros(n)),
        opacity_logit=Value(np.zeros(n)),
    )


def unit_rays(n, rng):
    d = rng.normal(size=(n, 3)) * 0.05
    d[:, 2] = 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.zeros((n, 3)), d


class TestGaussianConstruction:
    def test_offset_spans_exactly_one_bucket(self):
        """delta 0 lands on the bucket depth, delta 1 on the next boundary."""
        buckets = make_buckets(1.0, 10.0, 5)
        z = np.array([0, 2, 4], dtype=np.intp)
        phi = np.full((3, 5), 0.2)
        origins, directions = unit_rays(3, np.random.default_rng(15))
        for delta_value, expected in [
            (0.0, buckets.depths[z]),
            (1.0, buckets.depths[z] + buckets.widths[z]),
        ]:
            pred = manual_prediction(phi, np.full((3, 5), delta_value), 5)
            batch = _from_pred_with_fixed_z(pred, origins, directions, buckets, z)
            np.testing.assert_array_equal(batch.depth.data, expected)

    def test_means_lie_on_rays(self):
        buckets = make_buckets(1.0, 10.0, 6)
        rng = np.random.default_rng(17)
        pred = manual_prediction(
            rng.dirichlet(np.ones(6), 4), rng.uniform(0.2, 0.8, (4, 6)), 6
        )
        origins, directions = unit_rays(4, rng)
        batch = gaussians_from_prediction(pred, origins, directions, buckets, None, mode="argmax")
        np.testing.assert_array_equal(
            batch.means.data, batch.depth.data[:, None] * directions + origins
        )

    def test_argmax_mode_picks_modes_and_opacity_exactly(self):
        buckets = make_buckets(1.0, 10.0, 4)
        phi = np.array([[0.1, 0.6, 0.2, 0.1], [0.4, 0.1, 0.1, 0.4]])
        pred = manual_prediction(phi, np.full((2, 4), 0.5), 4)
        origins, directions = unit_rays(2, np.random.default_rng(19))
        batch = gaussians_from_prediction(pred, origins, directions, buckets, None, mode="argmax")
        np.testing.assert_array_equal(batch.z_index, [1, 0])
        assert batch.opacity.data[0] == phi[0, 1]
        assert batch.opacity.data[1] == phi[1, 0]

    def test_sample_mode_needs_rng_and_valid_mode(self):
        buckets = make_buckets(1.0, 10.0, 4)
        pred = manual_prediction(np.full((1, 4), 0.25), np.full((1, 4), 0.5), 4)
        origins, directions = unit_rays(1, np.random.default_rng(21))
        with pytest.raises(HeadError):
            gaussians_from_prediction(pred, origins, directions, buckets, None, mode="sample")
        with pytest.raises(HeadError):
            gaussians_from_prediction(pred, origins, directions, buckets, None, mode="best")

    def test_literal_offset_adds_scene_units(self):
        buckets = make_buckets(1.0, 10.0, 5)
        z = np.array([1], dtype=np.intp)
        pred = manual_prediction(np.full((1, 5), 0.2), np.full((1, 5), 0.3), 5)
        origins, directions = unit_rays(1, np.random.default_rng(23))
        batch = _from_pred_with_fixed_z(
            pred, origins, directions, buckets, z, literal_offset=True
        )
        assert batch.depth.data[0] == 0.3 + buckets.depths[1]

    def test_ray_shape_validated(self):
        buckets = make_buckets(1.0, 10.0, 4)
        pred = manual_prediction(np.full((2, 4), 0.25), np.full((2, 4), 0.5), 4)
        with pytest.raises(HeadError):
            gaussians_from_prediction(
                pred, np.zeros((3, 3)), np.zeros((3, 3)), buckets, None, mode="argmax"
            )

    def test_batch_primitives_detach(self):
        buckets = make_buckets(1.0, 10.0, 4)
        rng = np.random.default_rng(25)
        pred = manual_prediction(rng.dirichlet(np.ones(4), 3), rng.uniform(0, 1, (3, 4)), 4)
        origins, directions = unit_rays(3, rng)
        batch = gaussians_from_prediction(pred, origins, directions, buckets, None, mode="argmax")
        prims = batch_primitives(batch)
        assert len(prims) == 3
        assert all(isinstance(p, GaussianPrimitive) for p in prims)
        prims[0].mean[0] = 99.0  # detached copy, not a view
        assert batch.means.data[0, 0] != 99.0


class TestRegressionBaseline:
    def test_depth_squashed_into_range(self):
        rng = np.random.default_rng(27)
        pred = manual_prediction(rng.dirichlet(np.ones(4), 3), rng.uniform(0, 1, (3, 4)), 4)
        origins, directions = unit_rays(3, rng)
        batch = regression_gaussians(pred, origins, directions, 2.0, 8.0)
        # Zero logits: exactly the metric midpoint, opacity one half.
        np.testing.assert_array_equal(batch.depth.data, np.full(3, 5.0))
        np.testing.assert_array_equal(batch.opacity.data, np.full(3, 0.5))
        np.testing.assert_array_equal(batch.z_index, [-1, -1, -1])

    def test_single_pixel_wrappers(self):
        config = HeadConfig(z_count=4, hidden=8, sh_degree=0)
        params = init_head_params(config, 5, np.random.default_rng(29), scale_bias=-1.0)
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        buckets = make_buckets(1.0, 10.0, 4)
        prim = pixel_gaussian(
            np.zeros(5), ray, buckets, params, config, rng=np.random.default_rng(1)
        )
        assert isinstance(prim, GaussianPrimitive)
        assert prim.opacity == 0.25  # uniform phi over 4 buckets
        reg = regress_depth_baseline(np.zeros(5), ray, 1.0, 10.0, params, config)
        np.testing.assert_allclose(reg.mean, [0.0, 0.0, 5.5], rtol=1e-15)

    def test_bucket_count_mismatch_rejected(self):
        config = HeadConfig(z_count=4, hidden=8)
        params = init_head_params(config, 5, np.random.default_rng(31), scale_bias=0.0)
        ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(HeadError):
            pixel_gaussian(np.zeros(5), ray, make_buckets(1.0, 10.0, 6), params, config)


def _from_pred_with_fixed_z(pred, origins, directions, buckets, z, literal_offset=False):
    """gaussians_from_prediction with the bucket choice pinned, for tests
    that need a specific z."""
    from stereosplat.head import _realized_depth

    depth = _realized_depth(buckets, pred.delta, z, literal_offset)
    means = ad.reshape(depth, (z.size, 1)) * directions + origins
    alpha = ad.take_per_row(pred.phi, z)
    return GaussianBatch(
        means=means,
        scale_raw=pred.scale_raw,
        rotation_raw=pred.rotation_raw,
        opacity=alpha,
        sh=pred.sh,
        z_index=z,
        depth=depth,
    )


class TestFrozenSampleGradient:
    def test_fd_through_softmax_gather_render_loss(self):
        """With the drawn buckets held fixed, the photometric gradient flows
        through alpha = phi_z and the realized depth back to the head inputs;
        central differences over the feature vector and the output-layer
        weights agree to 1e-3 relative."""
        rng = np.random.default_rng(33)
        config = HeadConfig(z_count=6, hidden=12, sh_degree=0)
        params = init_head_params(config, 5, rng, scale_bias=-0.6)
        # Break the zero-bias symmetry so phi is not uniform.
        params["head_w2"].data = rng.normal(0.0, 0.3, params["head_w2"].data.shape)
        buckets = make_buckets(1.0, 8.0, 6)
        camera = make_camera(rng, width=8, height=8)
        n = 4
        origins, directions = unit_rays(n, rng)
        features = rng.normal(size=(n, 5))
        target = rng.uniform(0, 1, (8, 8, 3))
        background = np.array([0.2, 0.2, 0.2])

        pred0 = predict_batch(Value(features), params, config)
        z = np.array(
            [sample_depth(pred0.phi.data[i], np.random.default_rng(100 + i)) for i in range(n)],
            dtype=np.intp,
        )

        from stereosplat.rasterizer import render_value

        def loss_value(feature_value: Value) -> Value:
            pred = predict_batch(feature_value, params, config)
            batch = _from_pred_with_fixed_z(pred, origins, directions, buckets, z)
            img = render_value(
                camera,
                batch.means,
                batch.scale_raw,
                batch.rotation_raw,
                batch.opacity,
                batch.sh,
                background=background,
            )
            color = ad.slice_(img, (slice(None), slice(None), slice(0, 3)))
            return ad.mse(color, target)

        leaf = Value(features.copy())
        loss = loss_value(leaf)
        backward(loss)

        h = 1e-5
        for target_value, analytic in [(leaf, leaf.grad), (params["head_w2"], params["head_w2"].grad)]:
            flat = rng.choice(target_value.data.size, size=10, replace=False)
            for j in flat:
                original = target_value.data.ravel()[j]
                target_value.data.ravel()[j] = original + h
                hi = float(loss_value(Value(leaf.data)).data)
                target_value.data.ravel()[j] = original - h
                lo = float(loss_value(Value(leaf.data)).data)
                target_value.data.ravel()[j] = original
                fd = (hi - lo) / (2 * h)
                an = analytic.ravel()[j]
                assert abs(fd - an) <= max(1e-3 * abs(an), 1e-6), (j, fd, an)
