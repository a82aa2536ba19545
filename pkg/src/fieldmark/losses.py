"""Differentiable image losses.

The structural similarity here follows the original Gaussian-window
formulation (11x11, sigma 1.5, population covariance) and averages the map
over valid window positions only, so interior values agree with the common
reference implementations.  The perceptual term used during watermark
embedding is a pluggable composite of multi-scale structural similarity and
an image-gradient penalty; heavier learned metrics can be registered under a
new name without touching the training loop.
"""

from __future__ import annotations

import math
from typing import Callable, Dict

import torch
import torch.nn.functional as F


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _to_nchw(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 3:
        return image.permute(2, 0, 1).unsqueeze(0)
    if image.ndim == 4:
        return image.permute(0, 3, 1, 2)
    raise ValueError(f"expected (H, W, C) or (B, H, W, C), got {tuple(image.shape)}")


def ssim(
    image: torch.Tensor,
    reference: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Mean structural similarity over valid window positions.  Differentiable."""
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(image.shape)} vs {tuple(reference.shape)}")
    x = _to_nchw(image)
    y = _to_nchw(reference)
    if min(x.shape[-2], x.shape[-1]) < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    c = x.shape[1]
    win = gaussian_window(window_size, sigma, dtype=x.dtype).expand(c, 1, -1, -1)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def multiscale_ssim(
    image: torch.Tensor, reference: torch.Tensor, max_scales: int = 3, window_size: int = 11
) -> torch.Tensor:
    """Average of single-scale structural similarity over dyadic downsamplings.

    Scales that would shrink below the window are dropped; at least the native
    scale is always evaluated.
    """
    x = _to_nchw(image)
    y = _to_nchw(reference)
    vals = []
    for s in range(max_scales):
        if min(x.shape[-2], x.shape[-1]) < window_size:
            break
        vals.append(ssim(x.permute(0, 2, 3, 1), y.permute(0, 2, 3, 1), window_size))
        x = F.avg_pool2d(x, 2)
        y = F.avg_pool2d(y, 2)
    if not vals:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    return torch.stack(vals).mean()


def gradient_l1(image: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """L1 distance between horizontal/vertical finite-difference fields."""
    dxi = image[..., :, 1:, :] - image[..., :, :-1, :]
    dxr = reference[..., :, 1:, :] - reference[..., :, :-1, :]
    dyi = image[..., 1:, :, :] - image[..., :-1, :, :]
    dyr = reference[..., 1:, :, :] - reference[..., :-1, :, :]
    return (dxi - dxr).abs().mean() + (dyi - dyr).abs().mean()


def total_variation(image: torch.Tensor) -> torch.Tensor:
    """Mean absolute finite difference along both spatial axes."""
    dx = image[..., :, 1:, :] - image[..., :, :-1, :]
    dy = image[..., 1:, :, :] - image[..., :-1, :, :]
    return dx.abs().mean() + dy.abs().mean()


def psnr(image: torch.Tensor, reference: torch.Tensor, data_range: float = 1.0,
         cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical images."""
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(image.shape)} vs {tuple(reference.shape)}")
    mse = float(((image - reference) ** 2).mean())
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(data_range ** 2 / mse))


def structural_grad_loss(image: torch.Tensor, reference: torch.Tensor,
                         grad_weight: float = 0.5) -> torch.Tensor:
    """Default perceptual term: multi-scale dissimilarity plus gradient L1."""
    return (1.0 - multiscale_ssim(image, reference)) + grad_weight * gradient_l1(image, reference)


def l2_loss(image: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    return ((image - reference) ** 2).mean()


PERCEPTUAL_LOSSES: Dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "ssim_grad": structural_grad_loss,
    "l2": l2_loss,
}


def make_perceptual_loss(name: str) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    try:
        return PERCEPTUAL_LOSSES[name]
    except KeyError:
        raise ValueError(
            f"unknown perceptual loss {name!r}; available: {sorted(PERCEPTUAL_LOSSES)}"
        ) from None
