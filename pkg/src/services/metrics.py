import math
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.exceptions import EvaluationException, ShapeMismatchException

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0

# Returned for a perfect prediction; excluded from means and counted separately
PSNR_PERFECT = math.inf

def _pair(predicted, target, op: str):
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ShapeMismatchException(op, target.shape, predicted.shape)
    return predicted, target

def se(predicted, target) -> float:
    """Summed squared pixel error"""
    predicted, target = _pair(predicted, target, 'se')
    return float(np.sum((predicted - target) ** 2))

def mse(predicted, target) -> float:
    predicted, target = _pair(predicted, target, 'mse')
    return float(np.mean((predicted - target) ** 2))

def pixel_rmse(predicted, target) -> float:
    return math.sqrt(mse(predicted, target))

def psnr(predicted, target) -> float:
    error = mse(predicted, target)
    if error == 0.0:
        return PSNR_PERFECT
    return 10.0 * math.log10(DYNAMIC_RANGE ** 2 / error)

def ssim_window_size(height: int, width: int) -> int:
    return 11 if min(height, width) >= 64 else 7

def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2
    profile = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    window = np.outer(profile, profile)
    return window / window.sum()

def ssim(predicted, target, window_size: int = None) -> float:
    """Mean SSIM over all valid Gaussian-weighted windows"""
    predicted, target = _pair(predicted, target, 'ssim')
    if predicted.ndim != 2:
        raise ShapeMismatchException('ssim', ('H', 'W'), predicted.shape,
                                     message=f"ssim: expected a 2-D image, got shape {predicted.shape}")
    size = window_size or ssim_window_size(*predicted.shape)
    if min(predicted.shape) < size:
        raise EvaluationException(f"ssim: image {predicted.shape} is smaller than the {size}x{size} window",
                                  error_code="WINDOW_TOO_LARGE")
    window = gaussian_window(size)
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2

    def local_mean(image):
        return np.einsum('ijkl,kl->ij', sliding_window_view(image, (size, size)), window)

    mu_x, mu_y = local_mean(predicted), local_mean(target)
    var_x = local_mean(predicted * predicted) - mu_x * mu_x
    var_y = local_mean(target * target) - mu_y * mu_y
    cov = local_mean(predicted * target) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())
