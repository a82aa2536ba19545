"""Ray generation, ray marching, alpha compositing, and deferred backprop.

The deferred path renders the full image without gradients, evaluates the
image loss once, caches the per-pixel loss gradients, then re-renders the
image patch by patch with gradients enabled and injects the cached gradient
slice into each patch's backward pass.  Peak memory is bounded by the patch
size while the accumulated parameter gradients match a monolithic backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
import torch

from .conditioning import apply_film
from .grids import (
    density_activation,
    sample_appearance_features,
    sample_density_feature,
    sample_watermark_features,
)


@dataclass
class Camera:
    """Pinhole camera; ``cam_to_world`` maps camera axes (x right, y up, looking
    along -z) into world space."""

    width: int
    height: int
    focal: float
    cam_to_world: np.ndarray

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        if self.width < 8 or self.height < 8:
            raise ValueError(f"camera must be at least 8x8 pixels, got {self.width}x{self.height}")
        if self.focal <= 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        rot = self.cam_to_world[:3, :3]
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-4:
            raise ValueError(f"camera rotation is not orthonormal (max deviation {err:.2e})")

    def scaled(self, factor: int) -> "Camera":
        """Integer downscale of the image plane."""
        if factor < 1 or self.width % factor or self.height % factor:
            raise ValueError(f"cannot downscale {self.width}x{self.height} by {factor}")
        return Camera(self.width // factor, self.height // factor,
                      self.focal / factor, self.cam_to_world.copy())


def generate_rays(
    camera: Camera,
    pixel_indices: Optional[np.ndarray] = None,
    dtype: torch.dtype = torch.float32,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rays through pixel centers.

    pixel_indices: (N, 2) integer (row, col) pairs, or None for every pixel in
    row-major order.  Returns (origins, unit directions), each (N, 3).
    """
    if pixel_indices is None:
        rows, cols = np.meshgrid(
            np.arange(camera.height), np.arange(camera.width), indexing="ij")
        rows, cols = rows.reshape(-1), cols.reshape(-1)
    else:
        pixel_indices = np.asarray(pixel_indices)
        rows, cols = pixel_indices[:, 0], pixel_indices[:, 1]
        if rows.min() < 0 or rows.max() >= camera.height or cols.min() < 0 or cols.max() >= camera.width:
            raise ValueError("pixel index outside the image")
    x = (cols + 0.5 - camera.width / 2.0) / camera.focal
    y = -(rows + 0.5 - camera.height / 2.0) / camera.focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    rot = camera.cam_to_world[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.cam_to_world[:3, 3], dirs.shape)
    return (torch.as_tensor(origins.copy(), dtype=dtype),
            torch.as_tensor(dirs, dtype=dtype))


def sample_along_ray(
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: float,
    far: float,
    num_samples: int,
    jitter: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Positions, depths and marching steps for equal-width bins on [near, far].

    Deterministic mode (jitter None) places one sample at each bin midpoint and
    every step equals the bin width.  With ``jitter`` (N, Q) uniforms in [0, 1)
    samples are stratified inside their bins and steps are the consecutive
    depth differences, the last one reaching ``far``.
    """
    if far <= near:
        raise ValueError(f"far ({far}) must exceed near ({near})")
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    n = origins.shape[0]
    bin_width = (far - near) / num_samples
    base = torch.arange(num_samples, dtype=origins.dtype, device=origins.device)
    if jitter is None:
        t = near + (base + 0.5) * bin_width
        t = t.expand(n, num_samples)
        deltas = torch.full_like(t, bin_width)
    else:
        if jitter.shape != (n, num_samples):
            raise ValueError(f"jitter must be ({n}, {num_samples}), got {tuple(jitter.shape)}")
        t = near + (base + jitter.to(origins.dtype)) * bin_width
        deltas = torch.cat([t[:, 1:] - t[:, :-1], far - t[:, -1:]], dim=-1)
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    return positions, t, deltas


def composite(
    sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Alpha-composite per-sample densities and colors along the last sample dim.

    sigmas, deltas: (..., Q); colors: (..., Q, 3).  Returns (rgb (..., 3),
    opacity (...)).  Opacity is the accumulated alpha; adding a background is
    the caller's business.
    """
    if sigmas.shape != deltas.shape or colors.shape[:-1] != sigmas.shape:
        raise ValueError("composite: sigma/color/delta shapes do not line up")
    optical = sigmas * deltas
    alpha = 1.0 - torch.exp(-optical)
    csum = torch.cumsum(optical, dim=-1)
    trans = torch.exp(-(csum - optical))  # exclusive prefix sum: light reaching sample q
    weights = trans * alpha
    rgb = (weights[..., None] * colors).sum(dim=-2)
    return rgb, weights.sum(dim=-1)


def transmittance(sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Per-sample transmittance before each sample (exclusive), shape like sigmas."""
    optical = sigmas * deltas
    csum = torch.cumsum(optical, dim=-1)
    return torch.exp(-(csum - optical))


def _render_rays(
    model,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: float,
    far: float,
    num_samples: int,
    modulation,
    white_background: bool,
    weight_threshold: float,
    jitter: Optional[torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Shared ray batch pipeline.  Returns (rgb (N, 3), opacity (N,))."""
    n = origins.shape[0]
    q = num_samples
    positions, _, deltas = sample_along_ray(origins, dirs, near, far, q, jitter)
    flat_pts = positions.reshape(-1, 3)
    sigma = density_activation(sample_density_feature(model.density, flat_pts)).view(n, q)
    optical = sigma * deltas
    alpha = 1.0 - torch.exp(-optical)
    csum = torch.cumsum(optical, dim=-1)
    weights = torch.exp(-(csum - optical)) * alpha

    if weight_threshold > 0.0:
        mask = (weights > weight_threshold).reshape(-1)
    else:
        mask = torch.ones(n * q, dtype=torch.bool, device=weights.device)
    idx = mask.nonzero(as_tuple=False).squeeze(-1)

    rgb = origins.new_zeros(n, 3)
    if idx.numel():
        pts = flat_pts[idx]
        ray_of = torch.div(idx, q, rounding_mode="floor")
        pdirs = dirs[ray_of]
        feats = sample_appearance_features(model.appearance, pts)
        if modulation is None:
            wm = None
        else:
            scale, shift = modulation
            wm = apply_film(sample_watermark_features(model.watermark, pts), scale, shift)
        colors = model.color(feats, wm, pdirs)
        rgb = rgb.index_add(0, ray_of, weights.reshape(-1)[idx, None] * colors)
    opacity = weights.sum(dim=-1)
    if white_background:
        rgb = rgb + (1.0 - opacity)[:, None]
    return rgb, opacity


def render_ray_batch(
    model,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    wm_id: Optional[int] = None,
    *,
    near: float,
    far: float,
    num_samples: int = 64,
    white_background: bool = True,
    weight_threshold: float = 0.0,
    jitter: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Colors for explicit rays (training batches), shape (N, 3)."""
    modulation = model.modulation_for(wm_id) if wm_id is not None else None
    return _render_rays(model, origins, dirs, near, far, num_samples,
                        modulation, white_background, weight_threshold, jitter)[0]


def render_pixels(
    model,
    camera: Camera,
    pixel_indices: Optional[np.ndarray] = None,
    wm_id: Optional[int] = None,
    *,
    near: float,
    far: float,
    num_samples: int = 64,
    white_background: bool = True,
    weight_threshold: float = 0.0,
    jitter: Optional[torch.Tensor] = None,
    chunk: int = 0,
) -> torch.Tensor:
    """Colors of selected pixels, shape (N, 3).  ``wm_id=None`` renders clean."""
    dtype = next(model.parameters()).dtype
    origins, dirs = generate_rays(camera, pixel_indices, dtype=dtype)
    modulation = model.modulation_for(wm_id) if wm_id is not None else None
    if chunk and origins.shape[0] > chunk:
        parts = []
        for s in range(0, origins.shape[0], chunk):
            j = jitter[s : s + chunk] if jitter is not None else None
            parts.append(_render_rays(
                model, origins[s : s + chunk], dirs[s : s + chunk], near, far,
                num_samples, modulation, white_background, weight_threshold, j)[0])
        return torch.cat(parts, dim=0)
    return _render_rays(model, origins, dirs, near, far, num_samples,
                        modulation, white_background, weight_threshold, jitter)[0]


def render_image(
    model,
    camera: Camera,
    wm_id: Optional[int] = None,
    *,
    near: float,
    far: float,
    num_samples: int = 64,
    white_background: bool = True,
    weight_threshold: float = 0.0,
    jitter: Optional[torch.Tensor] = None,
    chunk: int = 1 << 14,
) -> torch.Tensor:
    """Full frame, shape (H, W, 3), values in [0, 1]."""
    rgb = render_pixels(
        model, camera, None, wm_id,
        near=near, far=far, num_samples=num_samples,
        white_background=white_background, weight_threshold=weight_threshold,
        jitter=jitter, chunk=chunk)
    return rgb.view(camera.height, camera.width, 3)


def iter_patches(height: int, width: int, patch: int) -> Iterator[Tuple[int, int, int, int]]:
    """(r0, r1, c0, c1) tiles covering the image; edge tiles may be smaller."""
    for r0 in range(0, height, patch):
        for c0 in range(0, width, patch):
            yield r0, min(r0 + patch, height), c0, min(c0 + patch, width)


def deferred_render_backward(
    model,
    camera: Camera,
    wm_id: Optional[int],
    image_loss_fn: Callable[[torch.Tensor], torch.Tensor],
    *,
    patch_size: int,
    near: float,
    far: float,
    num_samples: int = 64,
    white_background: bool = True,
    weight_threshold: float = 0.0,
    jitter: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Backpropagate an image-level loss with patch-bounded memory.

    ``image_loss_fn`` maps the full (H, W, 3) render to a scalar; it may touch
    every pixel (wavelets, structural terms).  Parameter gradients are
    accumulated into ``.grad`` exactly as a monolithic backward would.  Returns
    (detached loss, detached image).

    ``jitter``, when given, is one (H*W, Q) tensor reused by both passes so the
    two renders see identical sample positions.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    h, w = camera.height, camera.width
    dtype = next(model.parameters()).dtype
    origins, dirs = generate_rays(camera, dtype=dtype)
    modulation_src = (lambda: model.modulation_for(wm_id)) if wm_id is not None else (lambda: None)

    def ray_slice(r0, r1, c0, c1):
        rows = torch.arange(r0, r1)
        cols = torch.arange(c0, c1)
        flat = (rows[:, None] * w + cols[None, :]).reshape(-1)
        return flat

    # Pass 1: full image, no graph.
    with torch.no_grad():
        modulation = modulation_src()
        image = origins.new_zeros(h * w, 3)
        for r0, r1, c0, c1 in iter_patches(h, w, patch_size):
            flat = ray_slice(r0, r1, c0, c1)
            j = jitter[flat] if jitter is not None else None
            image[flat] = _render_rays(
                model, origins[flat], dirs[flat], near, far, num_samples,
                modulation, white_background, weight_threshold, j)[0]
        image = image.view(h, w, 3)

    # Pass 2: loss on the full image; cache per-pixel gradients.  backward()
    # rather than autograd.grad so leaves inside the loss itself (a trainable
    # bit decoder, say) receive their gradients here, once.
    pixels = image.clone().requires_grad_(True)
    loss = image_loss_fn(pixels)
    if loss.ndim != 0:
        raise ValueError("image_loss_fn must return a scalar")
    loss.backward()
    pixel_grad = pixels.grad

    # Pass 3: per-patch re-render with graph; inject the cached gradient slice.
    for r0, r1, c0, c1 in iter_patches(h, w, patch_size):
        flat = ray_slice(r0, r1, c0, c1)
        j = jitter[flat] if jitter is not None else None
        modulation = modulation_src()
        patch_rgb = _render_rays(
            model, origins[flat], dirs[flat], near, far, num_samples,
            modulation, white_background, weight_threshold, j)[0]
        if patch_rgb.requires_grad:
            patch_rgb.backward(gradient=pixel_grad.view(-1, 3)[flat])

    return loss.detach(), image.detach()
