"""Differentiable 2D wavelet transforms used as the decoder front end.

Single-level analysis/synthesis plus the two-level low-pass band that the bit
decoder consumes.  Only the orthonormal Haar family is implemented; the family
argument exists so a different filter bank can be added without touching call
sites.

Images are channel-last tensors ``(..., H, W, C)``.  With the orthonormal
normalization a constant image of value ``c`` has a one-level low-pass band of
``2c`` and a two-level one of ``4c``; downstream code divides the two-level
band by 4 to recover the block-average scale.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

WAVELET_FAMILIES = ("haar",)


class SubbandSet(NamedTuple):
    """One analysis level.  ``lh`` is high-pass along width, ``hl`` along height."""

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


def _check_family(family: str) -> None:
    if family not in WAVELET_FAMILIES:
        raise ValueError(f"unknown wavelet family {family!r}; available: {WAVELET_FAMILIES}")


def _check_even(image: torch.Tensor, what: str) -> None:
    if image.ndim < 3:
        raise ValueError(f"{what} expects (..., H, W, C), got shape {tuple(image.shape)}")
    h, w = image.shape[-3], image.shape[-2]
    if h % 2 or w % 2:
        raise ValueError(
            f"{what} needs even spatial dims, got {h}x{w}; "
            "pad first (see pad_to_multiple)"
        )


def dwt2_level(image: torch.Tensor, family: str = "haar") -> SubbandSet:
    """One level of the orthonormal 2D Haar transform."""
    _check_family(family)
    _check_even(image, "dwt2_level")
    a = image[..., 0::2, 0::2, :]
    b = image[..., 0::2, 1::2, :]
    c = image[..., 1::2, 0::2, :]
    d = image[..., 1::2, 1::2, :]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return SubbandSet(ll, lh, hl, hh)


def idwt2_level(bands: SubbandSet, family: str = "haar") -> torch.Tensor:
    """Exact inverse of :func:`dwt2_level` (the analysis matrix is involutory)."""
    _check_family(family)
    ll, lh, hl, hh = bands
    for name, band in zip(("lh", "hl", "hh"), (lh, hl, hh)):
        if band.shape != ll.shape:
            raise ValueError(f"subband {name} shape {tuple(band.shape)} != ll {tuple(ll.shape)}")
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w = ll.shape[-3], ll.shape[-2]
    out = ll.new_zeros(ll.shape[:-3] + (2 * h, 2 * w, ll.shape[-1]))
    out[..., 0::2, 0::2, :] = a
    out[..., 0::2, 1::2, :] = b
    out[..., 1::2, 0::2, :] = c
    out[..., 1::2, 1::2, :] = d
    return out


def ll2(image: torch.Tensor, family: str = "haar") -> torch.Tensor:
    """Two-level low-pass band; spatial dims must be multiples of 4."""
    _check_family(family)
    if image.ndim < 3:
        raise ValueError(f"ll2 expects (..., H, W, C), got shape {tuple(image.shape)}")
    h, w = image.shape[-3], image.shape[-2]
    if h % 4 or w % 4:
        raise ValueError(
            f"ll2 needs spatial dims divisible by 4, got {h}x{w}; "
            "pad first (see pad_to_multiple)"
        )
    return dwt2_level(dwt2_level(image, family).ll, family).ll


def pad_to_multiple(image: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad bottom/right so both spatial dims are multiples of ``multiple``."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    h, w = image.shape[-3], image.shape[-2]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return image
    if pad_h >= h or pad_w >= w:
        raise ValueError(f"image {h}x{w} too small to reflect-pad to a multiple of {multiple}")
    if pad_h:
        # rows h-2, h-3, ... (reflection without repeating the edge row)
        image = torch.cat([image, image[..., h - 1 - pad_h : h - 1, :, :].flip(-3)], dim=-3)
    if pad_w:
        w_cur = image.shape[-2]
        image = torch.cat([image, image[..., :, w_cur - 1 - pad_w : w_cur - 1, :].flip(-2)], dim=-2)
    return image
