"""Image quality metrics: PSNR, SSIM, floater score, masked depth RMSE."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, ShapeError

PSNR_CAP_DB = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on [0,1] images; identical pairs cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _valid_sepconv(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D window along both axes."""
    size = k.shape[0]
    tmp = ndimage.correlate1d(img, k, axis=0, mode="constant")
    tmp = ndimage.correlate1d(tmp, k, axis=1, mode="constant")
    half = size // 2
    return tmp[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5),
    C1=(0.01)^2, C2=(0.03)^2 for the [0,1] range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("ssim shape mismatch")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    if a.shape[0] < window or a.shape[1] < window:
        raise ContractViolation("image too small for the SSIM window")
    k = _gaussian_window(window, sigma)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = _valid_sepconv(a, k)
    mu_b = _valid_sepconv(b, k)
    aa = _valid_sepconv(a * a, k) - mu_a * mu_a
    bb = _valid_sepconv(b * b, k) - mu_b * mu_b
    ab = _valid_sepconv(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


def dilate_mask(mask: np.ndarray, px: int = 3) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, dtype=bool),
                                   structure=np.ones((3, 3), dtype=bool), iterations=px)


def floater_score(alpha: np.ndarray, silhouette: np.ndarray, dilate_px: int = 3) -> float:
    """Mean accumulated alpha outside the dilated mesh silhouette."""
    alpha = np.asarray(alpha, dtype=np.float64)
    outside = ~dilate_mask(silhouette, dilate_px)
    if not np.any(outside):
        return 0.0
    return float(alpha[outside].mean())


def masked_depth_rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, cap: float) -> float:
    """RMS depth residual over the mask; sentinel predictions count as cap."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    r = np.where(np.isfinite(pred), pred - target, cap)[mask]
    return float(np.sqrt(np.mean(r * r)))
