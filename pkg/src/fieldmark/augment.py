"""Differentiable image corruptions applied between rendering and decoding.

Every transform maps a float image in [0, 1] to another one of the same shape
and keeps gradients flowing (rounding steps use straight-through estimators).
A pipeline draw picks a fixed number of distinct kinds uniformly from the
pool, samples concrete parameters for each, then gates each through an
independent keep/drop coin, so a draw can come out empty.

Images are channel-last, (H, W, 3) or (B, H, W, 3); internals run NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


# ---------------------------------------------------------------------------
# layout helpers

def _as_nchw(image: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if image.ndim == 3:
        return image.permute(2, 0, 1).unsqueeze(0), True
    if image.ndim == 4:
        return image.permute(0, 3, 1, 2), False
    raise ValueError(f"expected (H, W, 3) or (B, H, W, 3), got {tuple(image.shape)}")


def _from_nchw(x: torch.Tensor, squeeze: bool) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x[0] if squeeze else x


def _conv_reflect(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise 2D convolution with reflect padding; kernel (kh, kw)."""
    c = x.shape[1]
    kh, kw = kernel.shape
    k = kernel.to(x.dtype).expand(c, 1, kh, kw)
    x = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode="reflect")
    return F.conv2d(x, k, groups=c)


def straight_through_round(x: torch.Tensor) -> torch.Tensor:
    """Round in the forward pass, identity in the backward pass."""
    return x + (torch.round(x) - x).detach()


# ---------------------------------------------------------------------------
# photometric transforms

_GRAY = (0.299, 0.587, 0.114)


def adjust_brightness(image: torch.Tensor, factor: float) -> torch.Tensor:
    return (image * factor).clamp(0.0, 1.0)


def adjust_contrast(image: torch.Tensor, factor: float) -> torch.Tensor:
    x, squeeze = _as_nchw(image)
    w = x.new_tensor(_GRAY).view(1, 3, 1, 1)
    mean = (x * w).sum(dim=1, keepdim=True).mean(dim=(-2, -1), keepdim=True)
    return _from_nchw(((x - mean) * factor + mean).clamp(0.0, 1.0), squeeze)


def adjust_saturation(image: torch.Tensor, factor: float) -> torch.Tensor:
    x, squeeze = _as_nchw(image)
    w = x.new_tensor(_GRAY).view(1, 3, 1, 1)
    gray = (x * w).sum(dim=1, keepdim=True)
    return _from_nchw((gray + factor * (x - gray)).clamp(0.0, 1.0), squeeze)


# RGB <-> YIQ; hue shifts rotate the chroma plane.
_YIQ = ((0.299, 0.587, 0.114),
        (0.595716, -0.274453, -0.321263),
        (0.211456, -0.522591, 0.311135))
_YIQ_INV = ((1.0, 0.9563, 0.6210),
            (1.0, -0.2721, -0.6474),
            (1.0, -1.1070, 1.7046))


def adjust_hue(image: torch.Tensor, shift: float) -> torch.Tensor:
    """shift is a fraction of a full turn, e.g. 0.01 rotates chroma by 3.6 degrees."""
    x, squeeze = _as_nchw(image)
    m = x.new_tensor(_YIQ)
    yiq = torch.einsum("ij,bjhw->bihw", m, x)
    theta = 2.0 * np.pi * shift
    cos_t, sin_t = float(np.cos(theta)), float(np.sin(theta))
    i, q = yiq[:, 1], yiq[:, 2]
    rot = torch.stack([yiq[:, 0], cos_t * i - sin_t * q, sin_t * i + cos_t * q], dim=1)
    out = torch.einsum("ij,bjhw->bihw", x.new_tensor(_YIQ_INV), rot)
    return _from_nchw(out.clamp(0.0, 1.0), squeeze)


def color_jitter(image: torch.Tensor, brightness: float, contrast: float,
                 saturation: float, hue: float) -> torch.Tensor:
    image = adjust_brightness(image, brightness)
    image = adjust_contrast(image, contrast)
    image = adjust_saturation(image, saturation)
    return adjust_hue(image, hue)


def rgb_shift(image: torch.Tensor, shifts: Sequence[float]) -> torch.Tensor:
    shifts = list(shifts)
    if len(shifts) != 3:
        raise ValueError("rgb_shift needs one offset per channel")
    return (image + image.new_tensor(shifts)).clamp(0.0, 1.0)


def add_gaussian_noise(image: torch.Tensor, std: float, seed: int) -> torch.Tensor:
    noise = np.random.default_rng(seed).standard_normal(tuple(image.shape))
    return (image + std * image.new_tensor(noise)).clamp(0.0, 1.0)


def posterize(image: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize to 2^bits levels with a straight-through gradient."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be 1..8, got {bits}")
    levels = 2 ** bits - 1
    return (straight_through_round(image.clamp(0.0, 1.0) * levels) / levels).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# blurs and sharpening

def _gaussian_kernel1d(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_blur(image: torch.Tensor, kernel_size: int, sigma: float) -> torch.Tensor:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError("kernel_size must be odd and positive")
    x, squeeze = _as_nchw(image)
    g = _gaussian_kernel1d(kernel_size, sigma, x.dtype)
    return _from_nchw(_conv_reflect(x, g[:, None] * g[None, :]).clamp(0.0, 1.0), squeeze)


def box_blur(image: torch.Tensor, kernel_size: int) -> torch.Tensor:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError("kernel_size must be odd and positive")
    x, squeeze = _as_nchw(image)
    k = torch.full((kernel_size, kernel_size), 1.0 / kernel_size ** 2, dtype=x.dtype)
    return _from_nchw(_conv_reflect(x, k).clamp(0.0, 1.0), squeeze)


def median_blur(image: torch.Tensor, kernel_size: int) -> torch.Tensor:
    """Windowed median; the gradient flows to the selected element."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError("kernel_size must be odd and positive")
    x, squeeze = _as_nchw(image)
    pad = kernel_size // 2
    xp = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    patches = xp.unfold(2, kernel_size, 1).unfold(3, kernel_size, 1)
    med = patches.reshape(*patches.shape[:4], -1).median(dim=-1).values
    return _from_nchw(med.clamp(0.0, 1.0), squeeze)


def motion_blur(image: torch.Tensor, kernel_size: int, angle_deg: float,
                direction: float) -> torch.Tensor:
    """Line blur at an angle; ``direction`` in [-1, 1] skews weight toward one end."""
    if kernel_size % 2 == 0 or kernel_size < 3:
        raise ValueError("kernel_size must be odd and >= 3")
    k = kernel_size
    kernel = np.zeros((k, k), dtype=np.float64)
    theta = np.deg2rad(angle_deg)
    dx, dy = np.cos(theta), np.sin(theta)
    center = (k - 1) / 2.0
    for i in range(k):
        frac = i / (k - 1)
        weight = 1.0 + direction * (2.0 * frac - 1.0)
        px = center + (i - center) * dx
        py = center + (i - center) * dy
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        for ox, oy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xi, yi = x0 + ox, y0 + oy
            if 0 <= xi < k and 0 <= yi < k:
                kernel[yi, xi] += weight * w
    kernel /= kernel.sum()
    x, squeeze = _as_nchw(image)
    return _from_nchw(_conv_reflect(x, x.new_tensor(kernel)).clamp(0.0, 1.0), squeeze)


def sharpness(image: torch.Tensor, factor: float) -> torch.Tensor:
    """Unsharp blend toward a lightly smoothed copy; 0 is the identity."""
    x, squeeze = _as_nchw(image)
    k = x.new_tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
    smooth = _conv_reflect(x, k)
    return _from_nchw((x + factor * (x - smooth)).clamp(0.0, 1.0), squeeze)


# ---------------------------------------------------------------------------
# differentiable JPEG

_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quality_to_scale(quality: int) -> float:
    """libjpeg quality-to-table scaling."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be 1..100, got {quality}")
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


def quantization_tables(quality: int) -> Tuple[np.ndarray, np.ndarray]:
    s = quality_to_scale(quality)
    tables = []
    for base in (_LUMA_TABLE, _CHROMA_TABLE):
        t = np.floor((base * s + 50.0) / 100.0)
        tables.append(np.clip(t, 1.0, 255.0))
    return tables[0], tables[1]


def _dct_matrix(dtype) -> torch.Tensor:
    """Orthonormal 8-point DCT-II matrix."""
    n = torch.arange(8, dtype=dtype)
    mat = torch.cos((2 * n[None, :] + 1) * n[:, None] * torch.pi / 16.0)
    scale = torch.full((8, 1), (2.0 / 8.0) ** 0.5, dtype=dtype)
    scale[0, 0] = (1.0 / 8.0) ** 0.5
    return scale * mat


def _blockify(channel: torch.Tensor) -> torch.Tensor:
    """(B, H, W) -> (B, H//8 * W//8, 8, 8)"""
    b, h, w = channel.shape
    x = channel.view(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    return x.reshape(b, -1, 8, 8)


def _unblockify(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b = blocks.shape[0]
    x = blocks.view(b, h // 8, w // 8, 8, 8).permute(0, 1, 3, 2, 4)
    return x.reshape(b, h, w)


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    """x: (B, 3, H, W) in [0, 255].  Full-range conversion, offsets at 128."""
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 128.0, x[:, 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def diff_jpeg(image: torch.Tensor, quality: int, rounding: bool = True) -> torch.Tensor:
    """JPEG compress-decompress with straight-through quantization.

    Standard tables scaled by the libjpeg quality curve, 8x8 DCT, 4:2:0 chroma
    subsampling.  With ``rounding=False`` quantization is skipped entirely and
    the transform reduces to chroma subsampling plus color round-trip.
    """
    x, squeeze = _as_nchw(image)
    h, w = x.shape[-2], x.shape[-1]
    pad_h = (-h) % 16
    pad_w = (-w) % 16
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    hp, wp = x.shape[-2], x.shape[-1]

    ycc = _rgb_to_ycbcr(x * 255.0)
    luma = ycc[:, 0] - 128.0
    chroma = F.avg_pool2d(ycc[:, 1:], 2) - 128.0

    d = _dct_matrix(x.dtype)
    tables = quantization_tables(quality)
    planes = []
    for plane, table, (ph, pw) in (
        (luma, tables[0], (hp, wp)),
        (chroma[:, 0], tables[1], (hp // 2, wp // 2)),
        (chroma[:, 1], tables[1], (hp // 2, wp // 2)),
    ):
        blocks = _blockify(plane)
        coeff = d @ blocks @ d.t()
        t = x.new_tensor(table)
        if rounding:
            coeff = straight_through_round(coeff / t) * t
        rec = d.t() @ coeff @ d
        planes.append(_unblockify(rec, ph, pw) + 128.0)

    cb = planes[1].repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    cr = planes[2].repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    rgb = _ycbcr_to_rgb(torch.stack([planes[0], cb, cr], dim=1)) / 255.0
    rgb = rgb[..., :h, :w].clamp(0.0, 1.0)
    return _from_nchw(rgb, squeeze)


# ---------------------------------------------------------------------------
# the pool and pipeline sampling

@dataclass(frozen=True)
class AugmentationSpec:
    """One pool entry: a kind plus the ranges its parameters are drawn from."""

    kind: str
    ranges: Dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class SampledTransform:
    """A kind with concrete parameter values, ready to apply."""

    kind: str
    params: Dict[str, object]


def default_pool() -> List[AugmentationSpec]:
    """The fourteen stock corruptions with their stock parameter ranges."""
    return [
        AugmentationSpec("jpeg", {"quality": 30}),
        AugmentationSpec("brightness", {"factor": (0.9, 1.1)}),
        AugmentationSpec("contrast", {"factor": (0.9, 1.1)}),
        AugmentationSpec("color_jitter", {
            "brightness": (0.95, 1.05), "contrast": (0.95, 1.05),
            "saturation": (0.95, 1.05), "hue": (-0.01, 0.01)}),
        AugmentationSpec("gaussian_blur", {"kernel_size": 3, "sigma": (0.1, 1.0)}),
        AugmentationSpec("gaussian_noise", {"std": 0.02}),
        AugmentationSpec("hue", {"shift": (-0.01, 0.01)}),
        AugmentationSpec("posterize", {"bits": 5}),
        AugmentationSpec("rgb_shift", {"limit": 0.02}),
        AugmentationSpec("saturation", {"factor": (0.9, 1.1)}),
        AugmentationSpec("median_blur", {"kernel_size": 3}),
        AugmentationSpec("box_blur", {"kernel_size": 3}),
        AugmentationSpec("motion_blur", {
            "kernel_sizes": (3, 5), "angle": (-25.0, 25.0), "direction": (-0.25, 0.25)}),
        AugmentationSpec("sharpness", {"factor": (0.0, 0.5)}),
    ]


def _uniform(rng: np.random.Generator, rng_range) -> float:
    lo, hi = rng_range
    return float(rng.uniform(lo, hi))


def sample_transform(spec: AugmentationSpec, rng: np.random.Generator) -> SampledTransform:
    """Draw concrete parameters for one pool entry."""
    r = spec.ranges
    if spec.kind == "jpeg":
        params = {"quality": int(r["quality"])}
    elif spec.kind in ("brightness", "contrast", "saturation"):
        params = {"factor": _uniform(rng, r["factor"])}
    elif spec.kind == "color_jitter":
        params = {k: _uniform(rng, r[k]) for k in ("brightness", "contrast", "saturation", "hue")}
    elif spec.kind == "gaussian_blur":
        params = {"kernel_size": int(r["kernel_size"]), "sigma": _uniform(rng, r["sigma"])}
    elif spec.kind == "gaussian_noise":
        params = {"std": float(r["std"]), "seed": int(rng.integers(0, 2 ** 31))}
    elif spec.kind == "hue":
        params = {"shift": _uniform(rng, r["shift"])}
    elif spec.kind == "posterize":
        params = {"bits": int(r["bits"])}
    elif spec.kind == "rgb_shift":
        lim = float(r["limit"])
        params = {"shifts": [float(v) for v in rng.uniform(-lim, lim, size=3)]}
    elif spec.kind in ("median_blur", "box_blur"):
        params = {"kernel_size": int(r["kernel_size"])}
    elif spec.kind == "motion_blur":
        params = {
            "kernel_size": int(rng.choice(list(r["kernel_sizes"]))),
            "angle_deg": _uniform(rng, r["angle"]),
            "direction": _uniform(rng, r["direction"]),
        }
    elif spec.kind == "sharpness":
        params = {"factor": _uniform(rng, r["factor"])}
    else:
        raise ValueError(f"unknown augmentation kind {spec.kind!r}")
    return SampledTransform(spec.kind, params)


_APPLY = {
    "jpeg": lambda img, p: diff_jpeg(img, p["quality"]),
    "brightness": lambda img, p: adjust_brightness(img, p["factor"]),
    "contrast": lambda img, p: adjust_contrast(img, p["factor"]),
    "color_jitter": lambda img, p: color_jitter(
        img, p["brightness"], p["contrast"], p["saturation"], p["hue"]),
    "gaussian_blur": lambda img, p: gaussian_blur(img, p["kernel_size"], p["sigma"]),
    "gaussian_noise": lambda img, p: add_gaussian_noise(img, p["std"], p["seed"]),
    "hue": lambda img, p: adjust_hue(img, p["shift"]),
    "posterize": lambda img, p: posterize(img, p["bits"]),
    "rgb_shift": lambda img, p: rgb_shift(img, p["shifts"]),
    "saturation": lambda img, p: adjust_saturation(img, p["factor"]),
    "median_blur": lambda img, p: median_blur(img, p["kernel_size"]),
    "box_blur": lambda img, p: box_blur(img, p["kernel_size"]),
    "motion_blur": lambda img, p: motion_blur(
        img, p["kernel_size"], p["angle_deg"], p["direction"]),
    "sharpness": lambda img, p: sharpness(img, p["factor"]),
}


def apply_transform(transform: SampledTransform, image: torch.Tensor) -> torch.Tensor:
    try:
        fn = _APPLY[transform.kind]
    except KeyError:
        raise ValueError(f"unknown augmentation kind {transform.kind!r}") from None
    return fn(image, transform.params)


@dataclass(frozen=True)
class PipelineDraw:
    """Outcome of one pipeline draw.

    ``selected`` holds the distinct kinds chosen before gating; ``applied`` the
    subset that survived its keep/drop coin, in application order.
    """

    selected: Tuple[SampledTransform, ...]
    applied: Tuple[SampledTransform, ...]


def draw_pipeline(
    pool: Sequence[AugmentationSpec],
    rng: np.random.Generator,
    count: int = 2,
    probability: float = 0.75,
) -> PipelineDraw:
    if count > len(pool):
        raise ValueError(f"cannot draw {count} distinct kinds from a pool of {len(pool)}")
    order = rng.choice(len(pool), size=count, replace=False)
    selected = tuple(sample_transform(pool[i], rng) for i in order)
    applied = tuple(t for t in selected if rng.uniform() < probability)
    return PipelineDraw(selected, applied)


def sample_pipeline(
    pool: Sequence[AugmentationSpec],
    rng: np.random.Generator,
    count: int = 2,
    probability: float = 0.75,
) -> List[SampledTransform]:
    """The transforms to actually apply for one training step (possibly none)."""
    return list(draw_pipeline(pool, rng, count, probability).applied)


def apply_pipeline(
    transforms: Sequence[SampledTransform], image: torch.Tensor
) -> torch.Tensor:
    for t in transforms:
        image = apply_transform(t, image)
    return image
