"""PSNR and SSIM on the BT.601 luminance plane."""
from typing import Tuple

import numpy as np
from scipy.ndimage import correlate1d

from msfin.core.exceptions import ShapeError
from msfin.models.common import ColorSpace
from msfin.utils.image import PlanarImage, rgb_to_ycbcr_y

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def luminance(img: PlanarImage) -> np.ndarray:
    """(H, W) Y plane of an RGB or Y image."""
    if img.space is ColorSpace.Y:
        return img.data[0]
    return rgb_to_ycbcr_y(img).data[0]


def shave_border(plane: np.ndarray, shave: int) -> np.ndarray:
    if shave <= 0:
        return plane
    h, w = plane.shape
    if 2 * shave >= h or 2 * shave >= w:
        raise ShapeError(f"shave {shave} leaves nothing of a {h}x{w} image")
    return plane[shave:h - shave, shave:w - shave]


def _paired_planes(sr: PlanarImage, hr: PlanarImage, shave: int) -> Tuple[np.ndarray, np.ndarray]:
    if sr.data.shape[1:] != hr.data.shape[1:]:
        raise ShapeError(f"image size mismatch: {sr.height}x{sr.width} vs {hr.height}x{hr.width}")
    return shave_border(luminance(sr), shave), shave_border(luminance(hr), shave)


def psnr_planes(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def psnr_y(sr: PlanarImage, hr: PlanarImage, shave: int = 0) -> float:
    """10 log10(1 / MSE) of the shaved Y planes; +inf for identical planes."""
    return psnr_planes(*_paired_planes(sr, hr, shave))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    half = taps.size // 2
    out = correlate1d(plane, taps, axis=0, mode="nearest")
    out = correlate1d(out, taps, axis=1, mode="nearest")
    return out[half:plane.shape[0] - half, half:plane.shape[1] - half]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM at every position where the window fits inside the image."""
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[0]}x{a.shape[1]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_planes(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim_map(a, b).mean())


def ssim_y(sr: PlanarImage, hr: PlanarImage, shave: int = 0) -> float:
    """Mean local SSIM of the shaved Y planes (11x11 Gaussian window, sigma 1.5)."""
    return ssim_planes(*_paired_planes(sr, hr, shave))
