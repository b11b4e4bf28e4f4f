"""Image-quality metrics, the noise estimator and feature diversity."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from hpalf.errors import ConfigurationError, DimensionError
from hpalf.metrics import (
    GMS_C,
    _gradient_magnitude,
    _texture_strength,
    estimate_noise_level,
    evaluate_volumes,
    feature_cosine_diversity,
    ffd,
    frechet_distance,
    gaussian_window,
    mean_psnr,
    psim_lite,
    psnr,
    ssim,
    to_unit_range,
)


def test_psnr_known_values():
    x = np.zeros((4, 4))
    assert psnr(x, x) == math.inf
    assert psnr(x, np.full((4, 4), 0.1)) == pytest.approx(20.0)
    assert psnr(x, np.full((4, 4), 0.2), data_range=2.0) == pytest.approx(20.0)
    with pytest.raises(DimensionError):
        psnr(x, np.zeros((4, 5)))


def test_mean_psnr_skips_exact_slices():
    assert mean_psnr([math.inf, 20.0, 30.0]) == pytest.approx(25.0)
    assert mean_psnr([math.inf]) == math.inf


def test_mean_psnr_warns_about_skipped_slices(caplog):
    with caplog.at_level(logging.WARNING, logger="hpalf"):
        mean_psnr([math.inf, math.inf, 20.0])
    assert "skips 2 exact slices out of 3" in caplog.text

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="hpalf"):
        mean_psnr([20.0, 30.0])
    assert caplog.text == ""


def test_gaussian_window_is_normalised():
    window = gaussian_window()
    assert window.shape == (11, 11)
    assert window.sum() == pytest.approx(1.0)
    assert window[5, 5] == window.max()


def test_ssim_properties(rng):
    image = rng.uniform(0, 1, size=(32, 32))
    assert ssim(image, image) == pytest.approx(1.0)
    noisy = np.clip(image + rng.normal(0, 0.2, size=image.shape), 0, 1)
    assert ssim(image, noisy) < 0.9
    assert ssim(image, noisy) == pytest.approx(ssim(noisy, image))
    with pytest.raises(ConfigurationError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_frechet_distance_of_shifted_gaussians(rng):
    features = rng.normal(size=(400, 4))
    assert frechet_distance(features, features).value == pytest.approx(0.0, abs=1e-8)
    shifted = frechet_distance(features, features + 0.5)
    assert shifted.value == pytest.approx(4 * 0.25, rel=1e-6)
    assert not shifted.loaded


def test_frechet_distance_loads_singular_covariances(rng):
    result = frechet_distance(rng.normal(size=(3, 8)), rng.normal(size=(3, 8)))
    assert result.loaded
    assert math.isfinite(result.value)
    with pytest.raises(ConfigurationError):
        frechet_distance(rng.normal(size=(1, 8)), rng.normal(size=(4, 8)))
    with pytest.raises(DimensionError):
        frechet_distance(rng.normal(size=(4, 8)), rng.normal(size=(4, 6)))


def test_ffd_is_zero_for_identical_sets(rng):
    images = rng.uniform(0, 1, size=(4, 16, 16))
    assert ffd(images, images).value == pytest.approx(0.0, abs=1e-6)


def test_psim_lite_is_one_for_identical_images(rng):
    image = rng.uniform(0, 1, size=(16, 16))
    assert psim_lite(image, image) == pytest.approx(1.0)
    assert psim_lite(image, np.zeros_like(image)) < 0.5


def test_noise_estimate_on_a_flat_image():
    sigma = 0.05
    image = 0.5 + np.random.default_rng(5).normal(0.0, sigma, size=(128, 128))
    estimate = estimate_noise_level(image)
    assert estimate.sigma == pytest.approx(sigma, rel=0.2)
    assert not estimate.low_confidence
    assert estimate.patches > 50
    assert 1 <= estimate.iterations <= 10


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("sigma", [0.05, 0.10, 0.20])
def test_noise_estimate_recovers_sigma_on_flat_images(sigma, seed):
    image = 0.5 + np.random.default_rng(seed).normal(0.0, sigma, size=(128, 128))
    assert estimate_noise_level(image).sigma == pytest.approx(sigma, rel=0.2)


def test_noise_estimate_rejects_small_images():
    with pytest.raises(ConfigurationError):
        estimate_noise_level(np.zeros((16, 16)))


def test_feature_cosine_diversity():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert feature_cosine_diversity([a, a]).mean_cosine == pytest.approx(1.0)
    assert feature_cosine_diversity([a, b]).mean_cosine == pytest.approx(0.0)
    result = feature_cosine_diversity([a, b, np.zeros((2, 2))])
    assert result.excluded == (2,)
    with pytest.raises(ConfigurationError):
        feature_cosine_diversity([a, np.zeros((2, 2))])
    with pytest.raises(DimensionError):
        feature_cosine_diversity([a, np.zeros((3, 3))])


def test_evaluate_volumes_on_identical_stacks(rng):
    volume = rng.uniform(-1, 1, size=(3, 16, 16))
    report = evaluate_volumes(volume, volume)
    assert report.psnr == math.inf
    assert report.ssim == pytest.approx(1.0)
    assert report.psim_lite == pytest.approx(1.0)
    assert report.ffd == pytest.approx(0.0, abs=1e-5)
    assert report.ffd_loaded
    assert [row.index for row in report.per_slice] == [0, 1, 2]


def test_evaluate_volumes_maps_to_unit_range(rng):
    reference = np.zeros((2, 16, 16))
    report = evaluate_volumes(reference, np.full((2, 16, 16), 0.2))
    # a 0.2 error on [-1, 1] is 0.1 on [0, 1]
    assert report.psnr == pytest.approx(20.0)
    np.testing.assert_allclose(to_unit_range(np.array([-1.0, 1.0])), [0.0, 1.0])


def test_ssim_of_constant_images_is_the_luminance_term():
    assert ssim(np.full((32, 32), 0.2), np.full((32, 32), 0.8)) == pytest.approx(0.4707, abs=5e-4)


def test_psim_lite_against_a_flat_image(rng):
    image = np.zeros((16, 16))
    image[:, 8:] = 1.0
    flat = np.full_like(image, 0.3)
    g = _gradient_magnitude(image)
    assert psim_lite(image, flat) == pytest.approx(float(np.mean(GMS_C / (g**2 + GMS_C))))
    noisy = rng.uniform(0, 1, size=(16, 16))
    assert psim_lite(noisy + 0.25, image + 0.25) == pytest.approx(psim_lite(noisy, image))


def test_ffd_is_symmetric(rng):
    a, b = rng.uniform(0, 1, size=(6, 16, 16)), rng.uniform(0, 1, size=(6, 16, 16))
    assert ffd(a, b).value == pytest.approx(ffd(b, a).value, rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_noise_estimate_is_monotone_and_vanishes_without_noise(seed):
    estimates = [
        estimate_noise_level(0.5 + np.random.default_rng(seed).normal(0.0, sigma, size=(96, 96))).sigma
        for sigma in (0.05, 0.10, 0.20)
    ]
    assert estimates == sorted(estimates)
    assert estimate_noise_level(np.full((64, 64), 0.5)).sigma < 0.005


def test_cosine_diversity_with_a_negated_map():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert feature_cosine_diversity([a, a, -a]).mean_cosine == pytest.approx(-1.0 / 3.0)


@settings(max_examples=25, deadline=None)
@given(
    scale=st.floats(min_value=0.1, max_value=10.0),
    offset=st.floats(min_value=-5.0, max_value=5.0),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_psnr_is_invariant_under_a_shared_affine_map(scale, offset, seed):
    generator = np.random.default_rng(seed)
    x = generator.uniform(0, 1, size=(8, 8))
    y = np.clip(x + generator.normal(0, 0.1, size=x.shape), 0, 1)
    assert psnr(scale * x + offset, scale * y + offset, data_range=scale) == pytest.approx(psnr(x, y), rel=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**16))
def test_ssim_is_symmetric(seed):
    generator = np.random.default_rng(seed)
    x, y = generator.uniform(0, 1, size=(2, 16, 16))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


@pytest.mark.parametrize("slopes", [(0.3, 0.0), (0.0, 0.2), (0.1, -0.4)])
def test_texture_of_a_plane_is_its_squared_slope_over_the_patch_interior(slopes):
    a, b = slopes
    rows, cols = np.mgrid[0:40, 0:40].astype(np.float64)
    texture = _texture_strength(a * cols + b * rows, 7)
    assert texture.shape == (34 * 34,)
    np.testing.assert_allclose(texture, 25 * (a**2 + b**2), rtol=1e-10, atol=1e-12)


def test_texture_of_noise_stays_below_the_gradient_energy(rng):
    image = rng.normal(0.0, 0.1, size=(40, 40))
    kernel = np.array([-0.5, 0.0, 0.5])
    grad_h = ndimage.correlate1d(image, kernel, axis=1, mode="nearest")[1:-1, 1:-1]
    grad_v = ndimage.correlate1d(image, kernel, axis=0, mode="nearest")[1:-1, 1:-1]
    energy = sliding_window_view(grad_h**2 + grad_v**2, (5, 5)).sum(axis=(2, 3)).reshape(-1)
    texture = _texture_strength(image, 7)
    assert np.all(texture <= energy + 1e-12)
    assert np.all(texture >= energy / 2 - 1e-12)


def test_noise_estimate_leaves_out_a_steep_ramp(rng):
    sigma = 0.05
    image = 0.5 + rng.normal(0.0, sigma, size=(128, 128))
    image[:, 64:] += 0.2 * np.arange(64)
    estimate = estimate_noise_level(image)
    assert estimate.sigma == pytest.approx(sigma, rel=0.2)
    assert estimate.patches < 122 * 122 * 0.6
