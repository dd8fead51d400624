"""Masked L1 / SSIM training losses and PSNR / SSIM metrics.

Images are batched as B x H x W x 3. Only "loss pixels" count: the
foreground mask minus a band around its silhouette.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
L1_WEIGHT = 8.0
SSIM_WEIGHT = 2.0


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def boundary_band(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Pixels within ``radius`` of the silhouette: dilation minus erosion."""
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return np.zeros_like(mask)
    fp = _disk(radius)
    if mask.ndim == 3:
        fp = fp[None]
    grown = ndimage.binary_dilation(mask, structure=fp)
    shrunk = ndimage.binary_erosion(mask, structure=fp, border_value=1)
    return grown & ~shrunk


def loss_pixels(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~boundary_band(mask, radius)


@lru_cache(maxsize=16)
def gaussian_filter_matrix(n: int, sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    """Dense n x n matrix of the 1D Gaussian window with mirror ('reflect') borders."""
    x = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    M = ndimage.correlate1d(np.eye(n), w, axis=0, mode="reflect")
    M.setflags(write=False)
    return M


def _separable(x: np.ndarray, Gv: np.ndarray, Gh: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    y = Gv @ x.transpose(1, 0, 2, 3).reshape(H, B * W * C)                # H x (B W C)
    y = y.reshape(H, B, W, C).transpose(2, 1, 0, 3).reshape(W, B * H * C)  # W x (B H C)
    y = Gh @ y
    return np.ascontiguousarray(y.reshape(W, B, H, C).transpose(1, 2, 0, 3))


def _blur(x: Tensor) -> Tensor:
    H, W = x.shape[1], x.shape[2]
    Gv = gaussian_filter_matrix(H).astype(x.dtype)
    Gh = gaussian_filter_matrix(W).astype(x.dtype)
    out = _separable(x.data, Gv, Gh)
    return ad.record("blur", out, (x,), lambda g: (_separable(g, Gv.T, Gh.T),))


def ssim_map(x, y) -> Tensor:
    """Per-pixel, per-channel SSIM of two B x H x W x C batches (population statistics)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y, dtype=x.dtype)
    if x.shape[1] < 2 * SSIM_RADIUS + 1 or x.shape[2] < 2 * SSIM_RADIUS + 1:
        raise ValueError("SSIM needs images of at least 11 x 11")
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def _as_batch(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x if x.ndim == 4 else ad.reshape(x, (1, *x.shape))


def _check(pred: Tensor, target: np.ndarray, pixels: np.ndarray):
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pixels.shape != pred.shape[:3]:
        raise ValueError("loss mask must be B x H x W")
    counts = pixels.reshape(len(pixels), -1).sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("empty loss region")
    return counts


def masked_l1(pred, target, pixels) -> Tensor:
    """Mean |pred - target| over loss pixels and channels, averaged over the batch."""
    pred = _as_batch(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    pixels = np.asarray(pixels, dtype=bool).reshape(pred.shape[:3])
    counts = _check(pred, target, pixels)
    C = pred.shape[3]
    weight = pixels[..., None] / (counts[:, None, None, None] * C * len(counts))
    diff = pred - Tensor(target, dtype=pred.dtype)
    return (_abs(diff) * Tensor(weight, dtype=pred.dtype)).sum()


def _abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return x * Tensor(sign, dtype=x.dtype)


def masked_ssim(pred, target, pixels) -> Tensor:
    """SSIM averaged over loss pixels; pixels outside them are zeroed in both images first."""
    pred = _as_batch(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    pixels = np.asarray(pixels, dtype=bool).reshape(pred.shape[:3])
    counts = _check(pred, target, pixels)
    keep = pixels[..., None].astype(pred.dtype)
    S = ssim_map(pred * Tensor(keep), Tensor(target * keep))
    C = pred.shape[3]
    weight = pixels[..., None] / (counts[:, None, None, None] * C * len(counts))
    return (S * Tensor(weight, dtype=pred.dtype)).sum()


def total_loss(pred, target, pixels, l1_weight: float = L1_WEIGHT, ssim_weight: float = SSIM_WEIGHT):
    """Weighted L1 + (1 - SSIM); returns (loss, l1, ssim) tensors."""
    l1 = masked_l1(pred, target, pixels)
    ss = masked_ssim(pred, target, pixels)
    return l1_weight * l1 + ssim_weight * (1.0 - ss), l1, ss


def psnr(pred, target, pixels) -> float:
    """10 log10(1 / MSE) over loss pixels; +inf when the images agree exactly."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    pixels = np.asarray(pixels, dtype=bool).reshape(pred.shape[:-1])
    if not pixels.any():
        raise ValueError("empty loss region")
    mse = float(np.mean((pred[pixels] - target[pixels]) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


def ssim_metric(pred, target, pixels) -> float:
    with ad.no_grad():
        return float(masked_ssim(np.asarray(pred, dtype=np.float64), target, pixels).item())
