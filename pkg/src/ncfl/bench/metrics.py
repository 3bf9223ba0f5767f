"""PSNR / SSIM on [0, 1] RGB tensors, and the median-filter baseline."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """``10 log10(1 / MSE)`` over every element; identical inputs give the 100 dB cap."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), valid windows only, averaged over channels and frames.

    Accepts ``[H, W]``, ``[C, H, W]`` or ``[..., C, H, W]`` tensors.
    """
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
    H, W = a.shape[-2:]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"ssim: image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = a.double().reshape(-1, 1, H, W)
    y = b.double().reshape(-1, 1, H, W)
    w = gaussian_window()[None, None]
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def median_filter(frame: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Per-channel ``k x k`` spatial median with reflect padding."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"median_filter: kernel size must be odd, got {k}")
    squeeze = frame.ndim == 3
    x = frame[None] if squeeze else frame
    lead = x.shape[:-2]
    H, W = x.shape[-2:]
    x = x.reshape(-1, 1, H, W)
    r = k // 2
    mode = "reflect" if r < H and r < W else "replicate"
    x = F.pad(x, (r, r, r, r), mode=mode)
    patches = F.unfold(x, k)  # [N, k*k, H*W]
    out = patches.median(dim=1).values.reshape(*lead, H, W)
    return out[0] if squeeze else out
