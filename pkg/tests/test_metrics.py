import math
import numpy as np
import pytest

from src.core.exceptions import EvaluationException, ShapeMismatchException
from src.services import metrics

def test_identical_images():
    image = np.random.default_rng(0).random((16, 16))
    assert metrics.se(image, image) == 0.0
    assert metrics.pixel_rmse(image, image) == 0.0
    assert metrics.ssim(image, image) == pytest.approx(1.0)
    assert metrics.psnr(image, image) == metrics.PSNR_PERFECT

def test_constant_offset_scores():
    target = np.full((32, 32), 0.2)
    predicted = target + 0.1
    assert metrics.se(predicted, target) == pytest.approx(32 * 32 * 0.01)
    assert metrics.mse(predicted, target) == pytest.approx(0.01)
    assert metrics.pixel_rmse(predicted, target) == pytest.approx(0.1)
    assert metrics.psnr(predicted, target) == pytest.approx(20.0)

def test_negative_image_scores_lower_than_itself():
    image = np.full((16, 16), 0.2)
    image[:, 8:] = 0.8
    negative = 1.0 - image
    assert metrics.ssim(image, negative) < metrics.ssim(image, image)
    assert metrics.ssim(image, negative) < 0.5

@pytest.mark.parametrize('seed', range(20))
def test_psnr_decreases_with_mse(seed):
    rng = np.random.default_rng(seed)
    target = rng.random((16, 16))
    near = np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1)
    far = np.clip(target + rng.normal(0, 0.2, target.shape), 0, 1)
    assert metrics.mse(near, target) < metrics.mse(far, target)
    assert metrics.psnr(near, target) > metrics.psnr(far, target)

@pytest.mark.parametrize('seed', range(20))
def test_ssim_is_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert -1.0 <= metrics.ssim(a, b) <= 1.0
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a))

def test_window_size_follows_resolution():
    assert metrics.ssim_window_size(32, 32) == 7
    assert metrics.ssim_window_size(64, 64) == 11
    window = metrics.gaussian_window(7)
    assert window.sum() == pytest.approx(1.0)
    assert np.array_equal(window, window.T)

def test_shape_mismatch_is_rejected():
    with pytest.raises(ShapeMismatchException):
        metrics.se(np.zeros((4, 4)), np.zeros((4, 5)))

def test_image_smaller_than_window():
    with pytest.raises(EvaluationException):
        metrics.ssim(np.zeros((5, 5)), np.zeros((5, 5)))

def test_ssim_of_flat_images_with_different_levels():
    a, b = np.full((16, 16), 0.3), np.full((16, 16), 0.6)
    c1 = (metrics.SSIM_K1 * metrics.DYNAMIC_RANGE) ** 2
    expected = (2 * 0.3 * 0.6 + c1) / (0.3 ** 2 + 0.6 ** 2 + c1)
    assert metrics.ssim(a, b) == pytest.approx(expected)
    assert math.isfinite(metrics.psnr(a, b))
