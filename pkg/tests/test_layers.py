import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synth import TEST_MATRIX

from skinchroma.chromophore import to_chromophore
from skinchroma.errors import ParameterError
from skinchroma.layers import default_sigma, gaussian_blur, gaussian_kernel, separate
from skinchroma.pixelcore import ColorSpace, PixelPatch


def patch_of(values: np.ndarray, space=ColorSpace.LOG_ABSORPTION) -> PixelPatch:
    if values.ndim == 2:
        values = np.stack([values] * 3)
    return PixelPatch(np.asarray(values, dtype=np.float64), space)


class TestKernel:
    def test_normalized(self):
        for sigma in (0.7, 2.0, 5.0, 11.3):
            k = gaussian_kernel(sigma)
            assert k.sum() == pytest.approx(1.0, abs=1e-15)
            assert len(k) == 2 * math.ceil(3 * sigma) + 1

    def test_bad_sigma(self):
        with pytest.raises(ParameterError):
            gaussian_kernel(0.0)
        with pytest.raises(ParameterError):
            gaussian_kernel(-1.0)


class TestBlur:
    def test_constant_preserved(self):
        p = patch_of(np.full((16, 20), 0.73))
        out = gaussian_blur(p, 3.0)
        np.testing.assert_allclose(out.channels, 0.73, atol=1e-12, rtol=0)

    def test_impulse_matches_direct_kernel_evaluation(self):
        # oracle: the separable kernel evaluated directly at integer offsets
        sigma = 2.5
        radius = math.ceil(3 * sigma)
        n = 4 * radius + 1
        field = np.zeros((n, n))
        field[n // 2, n // 2] = 1.0
        out = gaussian_blur(patch_of(field), sigma).channels[0]
        k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
        k /= k.sum()
        want = np.zeros((n, n))
        want[n // 2 - radius : n // 2 + radius + 1, n // 2 - radius : n // 2 + radius + 1] = np.outer(k, k)
        np.testing.assert_allclose(out, want, atol=1e-15, rtol=0)

    def test_mass_conserved_for_interior_signal(self):
        rng = np.random.default_rng(5)
        sigma = 2.0
        pad = math.ceil(3 * sigma)
        field = np.zeros((40, 44))
        field[pad + 2 : -pad - 2, pad + 2 : -pad - 2] = rng.uniform(0, 1, (40 - 2 * pad - 4, 44 - 2 * pad - 4))
        out = gaussian_blur(patch_of(field), sigma).channels[0]
        assert out.sum() == pytest.approx(field.sum(), abs=1e-9)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        p = patch_of(rng.uniform(0, 2, (12, 14)))
        q = patch_of(rng.uniform(0, 2, (12, 14)))
        a, b = 1.7, -0.4
        lhs = gaussian_blur(patch_of(a * p.channels[0] + b * q.channels[0]), 2.2).channels
        rhs = a * gaussian_blur(p, 2.2).channels + b * gaussian_blur(q, 2.2).channels
        np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)

    def test_commutes_with_chromophore_map(self):
        rng = np.random.default_rng(7)
        absorption = PixelPatch(rng.uniform(0.1, 1.5, (3, 16, 16)), ColorSpace.LOG_ABSORPTION)
        lhs = to_chromophore(gaussian_blur(absorption, 2.0), TEST_MATRIX).channels
        rhs = gaussian_blur(to_chromophore(absorption, TEST_MATRIX), 2.0).channels
        np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)

    def test_bad_sigma(self):
        with pytest.raises(ParameterError):
            gaussian_blur(patch_of(np.zeros((8, 8))), -2.0)


class TestSeparate:
    def test_constant_patch_has_zero_texture(self):
        pair = separate(patch_of(np.full((10, 10), 1.3)), 2.0)
        np.testing.assert_allclose(pair.texture.channels, 0.0, atol=1e-12)

    def test_reconstruction_bitwise(self):
        rng = np.random.default_rng(8)
        p = patch_of(rng.uniform(0.5, 1.0, (3, 13, 17)))
        pair = separate(p, 3.0)
        np.testing.assert_array_equal(pair.base.channels + pair.texture.channels, p.channels)

    def test_plane_texture_vanishes_in_interior(self):
        xx, yy = np.meshgrid(np.arange(32, dtype=float), np.arange(32, dtype=float))
        plane = 0.01 * xx - 0.02 * yy + 1.0
        sigma = 2.0
        pair = separate(patch_of(plane), sigma)
        border = math.ceil(3 * sigma)
        interior = pair.texture.channels[:, border:-border, border:-border]
        assert np.max(np.abs(interior)) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.floats(0.5, 8.0),
        st.integers(8, 24),
        st.integers(8, 24),
    )
    def test_reconstruction_property(self, seed, sigma, w, h):
        rng = np.random.default_rng(seed)
        p = patch_of(rng.uniform(0.5, 1.0, (3, h, w)))
        pair = separate(p, sigma)
        np.testing.assert_array_equal(pair.base.channels + pair.texture.channels, p.channels)

    def test_reconstruction_bitwise_on_smooth_fields(self):
        # realistic chromophore-scale content: smooth, texture << signal
        rng = np.random.default_rng(9)
        rough = rng.uniform(0.2, 2.0, (3, 24, 24))
        smooth = gaussian_blur(patch_of(rough[0]), 3.0).channels
        pair = separate(PixelPatch(smooth, ColorSpace.CHROMOPHORE), 2.0)
        np.testing.assert_array_equal(pair.base.channels + pair.texture.channels, smooth)


def test_default_sigma_scaling():
    assert default_sigma(200) == 5.0
    assert default_sigma(64) == 2.0   # clamped low
    assert default_sigma(1000) == 12.0  # clamped high
    assert default_sigma(400) == 10.0
