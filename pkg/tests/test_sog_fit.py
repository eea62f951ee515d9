import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import equivalent_gaussians, jacobian_column_errors, matrix_form_gaussian, random_gaussian

from skinchroma.errors import ParameterError, RankError
from skinchroma.pixelcore import ColorSpace, PixelPatch
from skinchroma.sog_fit import (
    GaussianParams,
    PlaneModel,
    build_covariance,
    eval_gaussian,
    eval_model,
    fit_blemish,
    fit_incremental,
    fit_plane,
    residual_jacobian,
    wrap_theta,
)


class TestCovariance:
    def test_axis_aligned(self):
        np.testing.assert_allclose(build_covariance(2.0, 1.0, 0.0), np.diag([4.0, 1.0]), atol=1e-15)

    def test_quarter_turn_swaps_axes(self):
        np.testing.assert_allclose(build_covariance(2.0, 1.0, math.pi / 2), np.diag([1.0, 4.0]), atol=1e-14)

    def test_eigenvalues_are_squared_stddevs(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            sx, sy = rng.uniform(0.5, 5.0, 2)
            th = rng.uniform(0, math.pi)
            cov = build_covariance(sx, sy, th)
            evals = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(evals, np.sort([sx**2, sy**2]), rtol=1e-12)
            assert np.linalg.det(cov) == pytest.approx((sx * sy) ** 2, rel=1e-12)

    def test_bad_sigma(self):
        with pytest.raises(ParameterError):
            build_covariance(0.0, 1.0, 0.0)


class TestEvalGaussian:
    def test_unit_peak(self):
        g = GaussianParams(a=2 * math.pi, mu=(3.0, 4.0), sigma_x=1.0, sigma_y=1.0, theta=0.0)
        assert eval_gaussian(g, (3.0, 4.0)) == pytest.approx(1.0, abs=1e-15)

    def test_unit_mahalanobis_step(self):
        g = GaussianParams(a=2 * math.pi, mu=(3.0, 4.0), sigma_x=1.0, sigma_y=1.0, theta=0.0)
        assert eval_gaussian(g, (4.0, 4.0)) == pytest.approx(math.exp(-0.5), abs=1e-15)

    def test_matches_matrix_form(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = random_gaussian(rng, 32, 32)
            cov = build_covariance(g.sigma_x, g.sigma_y, g.theta)
            x = rng.uniform(0, 32, 2)
            want = matrix_form_gaussian(g.a, g.mu, cov, x)
            assert eval_gaussian(g, x) == pytest.approx(want, abs=1e-12 * max(1.0, abs(want)))

    def test_theta_pi_periodic(self):
        g = GaussianParams(a=3.0, mu=(5.0, 5.0), sigma_x=2.0, sigma_y=1.0, theta=0.7)
        shifted = GaussianParams(a=3.0, mu=(5.0, 5.0), sigma_x=2.0, sigma_y=1.0, theta=0.7 + math.pi)
        assert shifted.theta == pytest.approx(0.7, abs=1e-12)  # wrapped on construction
        for x in [(4.0, 6.5), (9.0, 2.0)]:
            assert eval_gaussian(g, x) == pytest.approx(eval_gaussian(shifted, x), abs=1e-15)

    def test_axis_swap_equivalence(self):
        g = GaussianParams(a=-2.0, mu=(6.0, 7.0), sigma_x=3.0, sigma_y=1.5, theta=0.4)
        swapped = GaussianParams(a=-2.0, mu=(6.0, 7.0), sigma_x=1.5, sigma_y=3.0, theta=0.4 + math.pi / 2)
        field_a = eval_model(PlaneModel((0, 0), 0.0), [g], 16, 16)
        field_b = eval_model(PlaneModel((0, 0), 0.0), [swapped], 16, 16)
        np.testing.assert_allclose(field_a, field_b, atol=1e-12)

    def test_wrap_theta_range(self):
        for t in (-10.0, -math.pi, 0.0, 1.0, math.pi, 7.5):
            w = wrap_theta(t)
            assert 0.0 <= w < math.pi


class TestEvalModel:
    def test_empty_gaussians_is_pure_plane(self):
        plane = PlaneModel(k=(0.5, -0.25), d=2.0)
        field = eval_model(plane, [], 6, 4)
        xx, yy = np.meshgrid(np.arange(6.0), np.arange(4.0))
        np.testing.assert_array_equal(field, 0.5 * xx - 0.25 * yy + 2.0)

    def test_zero_plane_single_gaussian(self):
        g = GaussianParams(a=2.0, mu=(3.0, 2.0), sigma_x=1.5, sigma_y=1.0, theta=0.3)
        field = eval_model(PlaneModel((0.0, 0.0), 0.0), [g], 7, 5)
        for y in range(5):
            for x in range(7):
                assert field[y, x] == pytest.approx(eval_gaussian(g, (x, y)), abs=1e-14)

    def test_amplitude_linearity(self):
        rng = np.random.default_rng(2)
        gs = [random_gaussian(rng, 20, 20) for _ in range(3)]
        plane = PlaneModel(k=(0.1, 0.2), d=1.0)
        base = eval_model(plane, [], 20, 20)
        one = eval_model(plane, gs, 20, 20)
        doubled = [GaussianParams(2 * g.a, g.mu, g.sigma_x, g.sigma_y, g.theta) for g in gs]
        two = eval_model(plane, doubled, 20, 20)
        np.testing.assert_allclose(two - base, 2.0 * (one - base), rtol=1e-12, atol=1e-14)


class TestJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            plane = PlaneModel(k=(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)), d=rng.uniform(-1, 1))
            gaussians = [random_gaussian(rng, 16, 16) for _ in range(rng.integers(1, 3))]
            observed = rng.uniform(0, 1, (16, 16))
            errors = jacobian_column_errors(plane, gaussians, 16, 16, observed)
            assert errors.max() < 1e-4

    def test_amplitude_column_is_value_over_amplitude(self):
        g = GaussianParams(a=2.5, mu=(8.0, 8.0), sigma_x=2.0, sigma_y=3.0, theta=0.9)
        r, jac = residual_jacobian(PlaneModel((0, 0), 0.0), [g], 16, 16, np.zeros((16, 16)))
        np.testing.assert_allclose(jac[:, 3], r / g.a, atol=1e-14)

    def test_theta_column_zero_for_isotropic(self):
        g = GaussianParams(a=2.5, mu=(8.0, 8.0), sigma_x=2.0, sigma_y=2.0, theta=1.2)
        _, jac = residual_jacobian(PlaneModel((0, 0), 0.0), [g], 16, 16, np.zeros((16, 16)))
        np.testing.assert_array_equal(jac[:, 8], 0.0)


class TestFitPlane:
    def test_exact_plane(self):
        xx, yy = np.meshgrid(np.arange(12.0), np.arange(10.0))
        plane = fit_plane(2.0 * xx + 3.0 * yy + 1.0)
        assert plane.k[0] == pytest.approx(2.0, rel=1e-12)
        assert plane.k[1] == pytest.approx(3.0, rel=1e-12)
        assert plane.d == pytest.approx(1.0, rel=1e-12)

    def test_constant_field(self):
        plane = fit_plane(np.full((9, 9), 4.25))
        assert plane.k == (0.0, 0.0)
        assert plane.d == pytest.approx(4.25, rel=1e-15)

    def test_noisy_slopes_within_three_standard_errors(self):
        # statistical oracle: OLS slope stddev is sigma / sqrt(S_cc)
        w = h = 24
        xx, yy = np.meshgrid(np.arange(float(w)), np.arange(float(h)))
        sxx = np.sum((xx - xx.mean()) ** 2)
        syy = np.sum((yy - yy.mean()) ** 2)
        sigma = 0.01
        se_x, se_y = sigma / math.sqrt(sxx), sigma / math.sqrt(syy)
        hits = 0
        standardized = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            field = 0.03 * xx - 0.05 * yy + 0.7 + rng.normal(0, sigma, (h, w))
            plane = fit_plane(field)
            ok_x = abs(plane.k[0] - 0.03) < 3 * se_x
            ok_y = abs(plane.k[1] + 0.05) < 3 * se_y
            hits += ok_x and ok_y
            standardized += [(plane.k[0] - 0.03) / se_x, (plane.k[1] + 0.05) / se_y]
        assert hits >= 97  # 3-sigma misses are ~0.5% per fit
        assert abs(np.mean(standardized)) < 0.5

    def test_degenerate_geometry(self):
        with pytest.raises(RankError):
            fit_plane(np.zeros((1, 16)))
        with pytest.raises(RankError):
            fit_plane(np.zeros((1, 2)))


class TestFitIncremental:
    def test_single_gaussian_noise_free(self):
        plane = PlaneModel(k=(0.01, -0.02), d=0.5)
        true = GaussianParams(a=3.0, mu=(20.0, 25.0), sigma_x=4.0, sigma_y=2.0, theta=0.6)
        field = eval_model(plane, [true], 64, 64)
        got_plane, gaussians, rms, diag = fit_incremental(field)
        assert len(gaussians) == 1
        assert equivalent_gaussians(gaussians[0], true, rel=0.01, theta_tol=0.02)
        assert got_plane.k[0] == pytest.approx(0.01, rel=0.01)
        assert got_plane.k[1] == pytest.approx(-0.02, rel=0.01)
        assert got_plane.d == pytest.approx(0.5, rel=0.01)
        assert rms < 1e-8
        assert diag.converged

    def test_single_gaussian_with_noise(self):
        plane = PlaneModel(k=(0.01, -0.02), d=0.5)
        true = GaussianParams(a=3.0, mu=(20.0, 25.0), sigma_x=4.0, sigma_y=2.0, theta=0.6)
        field = eval_model(plane, [true], 64, 64)
        peak = abs(eval_gaussian(true, true.mu))
        rng = np.random.default_rng(7)
        noisy = field + rng.normal(0.0, 0.01 * peak, field.shape)
        _, gaussians, _, _ = fit_incremental(noisy)
        assert len(gaussians) >= 1
        # the dominant recovered term matches within 5%
        main = max(gaussians, key=lambda g: abs(g.a))
        assert equivalent_gaussians(main, true, rel=0.05, theta_tol=0.1)

    def test_zero_field(self):
        plane, gaussians, rms, _ = fit_incremental(np.zeros((16, 16)))
        assert gaussians == ()
        assert plane.k == (0.0, 0.0) and plane.d == 0.0
        assert rms == 0.0

    def test_two_well_separated_gaussians(self):
        g1 = GaussianParams(a=4.0, mu=(16.0, 18.0), sigma_x=3.0, sigma_y=3.0, theta=0.0)
        g2 = GaussianParams(a=-2.5, mu=(46.0, 44.0), sigma_x=2.5, sigma_y=2.0, theta=1.1)
        field = eval_model(PlaneModel((0.0, 0.0), 1.0), [g1, g2], 64, 64)
        _, gaussians, _, _ = fit_incremental(field)
        assert len(gaussians) == 2
        centers = sorted((g.mu for g in gaussians), key=lambda m: m[0])
        assert abs(centers[0][0] - 16.0) < 1.0 and abs(centers[0][1] - 18.0) < 1.0
        assert abs(centers[1][0] - 46.0) < 1.0 and abs(centers[1][1] - 44.0) < 1.0

    def test_rms_monotone_over_stages(self):
        rng = np.random.default_rng(9)
        gs = [random_gaussian(rng, 48, 48) for _ in range(3)]
        field = eval_model(PlaneModel((0.02, -0.01), 0.3), gs, 48, 48)
        _, _, _, diag = fit_incremental(field)
        stages = diag.rms_per_stage
        assert all(stages[i + 1] <= stages[i] + 1e-15 for i in range(len(stages) - 1))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        field = eval_model(PlaneModel((0.0, 0.0), 0.0), [random_gaussian(rng, 32, 32)], 32, 32)
        field = field + rng.normal(0, 0.001, field.shape)
        a = fit_incremental(field)
        b = fit_incremental(field)
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert a[2] == b[2]

    def test_too_small_field(self):
        with pytest.raises(ParameterError):
            fit_incremental(np.zeros((7, 20)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_theta_always_wrapped(self, seed):
        rng = np.random.default_rng(seed)
        field = eval_model(PlaneModel((0.0, 0.0), 0.2), [random_gaussian(rng, 24, 24)], 24, 24)
        _, gaussians, _, _ = fit_incremental(field)
        for g in gaussians:
            assert 0.0 <= g.theta < math.pi


class TestFitBlemish:
    def test_blemish_only_in_one_channel(self):
        g = GaussianParams(a=5.0, mu=(16.0, 16.0), sigma_x=4.0, sigma_y=4.0, theta=0.0)
        channels = np.zeros((3, 32, 32))
        channels[0] = 0.4
        channels[1] = eval_model(PlaneModel((0.001, 0.002), 0.8), [g], 32, 32)
        channels[2] = 0.1
        patch = PixelPatch(channels, ColorSpace.CHROMOPHORE)
        fit = fit_blemish(patch)
        assert fit.channels["H"].n == 0
        assert fit.channels["r"].n == 0
        assert fit.channels["M"].n >= 1

    def test_flat_patch_has_no_gaussians(self):
        patch = PixelPatch(np.full((3, 16, 16), 0.7), ColorSpace.CHROMOPHORE)
        fit = fit_blemish(patch)
        assert all(fit.channels[k].n == 0 for k in ("H", "M", "r"))

    def test_rms_never_worse_than_plane_only(self):
        rng = np.random.default_rng(11)
        channels = np.stack(
            [eval_model(PlaneModel((0.01, 0.0), 0.5), [random_gaussian(rng, 24, 24)], 24, 24) for _ in range(3)]
        )
        patch = PixelPatch(channels, ColorSpace.CHROMOPHORE)
        fit = fit_blemish(patch)
        for i, key in enumerate(("H", "M", "r")):
            plane = fit_plane(channels[i])
            plane_rms = float(np.sqrt(np.mean((channels[i] - plane.evaluate(24, 24)) ** 2)))
            assert fit.channels[key].rms <= plane_rms + 1e-15

    def test_noise_channels_stay_bounded(self, spot_fixture, spot_cfg, spot_prepared):
        # channels carrying only quantization noise must not end up with
        # mangled out-of-domain terms or a worse-than-plane rms
        w, h = spot_prepared.base.width, spot_prepared.base.height
        sigma_max = np.hypot(w, h)
        for i, key in enumerate(("H", "M", "r")):
            ch = spot_prepared.fit.channels[key]
            field = spot_prepared.base.channels[i]
            plane = fit_plane(field)
            plane_rms = float(np.sqrt(np.mean((field - plane.evaluate(w, h)) ** 2)))
            assert ch.rms <= plane_rms + 1e-15
            for g in ch.gaussians:
                assert -0.25 * w <= g.mu[0] <= 1.25 * w
                assert -0.25 * h <= g.mu[1] <= 1.25 * h
                assert g.sigma_x <= sigma_max and g.sigma_y <= sigma_max

    def test_requires_chromophore_space(self):
        patch = PixelPatch(np.zeros((3, 16, 16)), ColorSpace.LINEAR)
        with pytest.raises(Exception):
            fit_blemish(patch)

    def test_blemish_field_matches_manual_sum(self):
        g = GaussianParams(a=5.0, mu=(10.0, 12.0), sigma_x=3.0, sigma_y=2.0, theta=0.2)
        channels = np.zeros((3, 24, 24))
        channels[1] = eval_model(PlaneModel((0.0, 0.0), 0.6), [g], 24, 24)
        channels[0] = channels[2] = 0.3
        fit = fit_blemish(PixelPatch(channels, ColorSpace.CHROMOPHORE))
        field = fit.blemish_field()
        want = eval_model(PlaneModel((0.0, 0.0), 0.0), fit.channels["M"].gaussians, 24, 24)
        np.testing.assert_array_equal(field[1], want)
        np.testing.assert_array_equal(field[0], 0.0)


def test_json_shape():
    g = GaussianParams(a=5.0, mu=(10.0, 12.0), sigma_x=3.0, sigma_y=2.0, theta=0.2)
    channels = np.zeros((3, 16, 16))
    channels[1] = eval_model(PlaneModel((0.0, 0.0), 0.6), [g], 16, 16)
    channels[0] = channels[2] = 0.3
    fit = fit_blemish(PixelPatch(channels, ColorSpace.CHROMOPHORE))
    obj = fit.to_json_obj()
    assert set(obj) == {"H", "M", "r"}
    m = obj["M"]
    assert set(m) == {"plane", "gaussians", "rms"}
    assert set(m["plane"]) == {"k", "d"}
    assert all(set(g_) == {"a", "mu", "sigma", "theta"} for g_ in m["gaussians"])
