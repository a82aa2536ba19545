"""Assembly of the watermarked radiance field.

One density grid, one appearance grid with a shared basis, one watermark grid,
plus the ID embedder, the modulator, and the color head.  The model itself is
geometry-free: cameras, ray marching and compositing live in ``rendering``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import torch
import torch.nn as nn

from .conditioning import ColorDecoder, IdEmbedder, Modulator, apply_film
from .grids import (
    VMGrid,
    density_activation,
    sample_appearance_features,
    sample_density_feature,
    sample_watermark_features,
)


@dataclass
class ModelSpec:
    """Hyperparameters that fully determine the module shapes."""

    bounds: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    resolution: Tuple[int, int, int] = (96, 96, 96)
    density_rank: int = 16
    appearance_rank: int = 48
    appearance_dim: int = 27
    watermark_rank: int = 8
    num_ids: int = 64
    embed_dim: int = 16
    hidden_dim: int = 128
    view_freqs: int = 2

    @property
    def watermark_dim(self) -> int:
        return 3 * self.watermark_rank

    def to_dict(self) -> dict:
        return {
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "resolution": list(self.resolution),
            "density_rank": self.density_rank,
            "appearance_rank": self.appearance_rank,
            "appearance_dim": self.appearance_dim,
            "watermark_rank": self.watermark_rank,
            "num_ids": self.num_ids,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "view_freqs": self.view_freqs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["bounds"] = (tuple(d["bounds"][0]), tuple(d["bounds"][1]))
        d["resolution"] = tuple(d["resolution"])
        return cls(**d)


class SceneModel(nn.Module):
    """Factorized radiance field with keyed watermark conditioning."""

    def __init__(
        self,
        spec: ModelSpec,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.spec = spec
        bounds = spec.bounds
        self.density = VMGrid(
            spec.resolution, spec.density_rank, bounds,
            generator=generator, dtype=dtype)
        self.appearance = VMGrid(
            spec.resolution, spec.appearance_rank, bounds, out_dim=spec.appearance_dim,
            generator=generator, dtype=dtype)
        self.watermark = VMGrid(
            spec.resolution, spec.watermark_rank, bounds,
            generator=generator, dtype=dtype)
        self.embedder = IdEmbedder(spec.num_ids, spec.embed_dim, dtype=dtype)
        self.modulator = Modulator(spec.embed_dim, spec.watermark_dim, dtype=dtype)
        self.color = ColorDecoder(
            spec.appearance_dim, spec.watermark_dim, spec.hidden_dim,
            num_freqs=spec.view_freqs, dtype=dtype)

    # ---- parameter groups -------------------------------------------------

    def grid_parameters(self) -> Iterable[nn.Parameter]:
        """Plane and line coefficients of all three grids (fast learning rate)."""
        for grid in (self.density, self.appearance, self.watermark):
            yield from grid.planes.parameters()
            yield from grid.lines.parameters()

    def network_parameters(self) -> Iterable[nn.Parameter]:
        """Basis, color head, embedder and modulator (slow learning rate)."""
        yield from self.appearance.basis.parameters()
        yield from self.color.parameters()
        yield from self.embedder.parameters()
        yield from self.modulator.parameters()

    def scene_parameters(self) -> Iterable[nn.Parameter]:
        """Everything untouched by the watermark branch (used for scene pretraining)."""
        for grid in (self.density, self.appearance):
            yield from grid.planes.parameters()
            yield from grid.lines.parameters()
        yield from self.appearance.basis.parameters()
        yield from self.color.parameters()

    def watermark_parameters(self) -> Iterable[nn.Parameter]:
        yield from self.watermark.planes.parameters()
        yield from self.watermark.lines.parameters()
        yield from self.embedder.parameters()
        yield from self.modulator.parameters()

    # ---- queries -----------------------------------------------------------

    def modulation_for(self, wm_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Per-render (scale, shift) pair; compute once per image, not per point."""
        return self.modulator(self.embedder(int(wm_id)))

    def query_density(self, points: torch.Tensor) -> torch.Tensor:
        return density_activation(sample_density_feature(self.density, points))

    def query_color(
        self,
        points: torch.Tensor,
        dirs: torch.Tensor,
        modulation: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> torch.Tensor:
        feats = sample_appearance_features(self.appearance, points)
        if modulation is None:
            wm = None
        else:
            scale, shift = modulation
            wm = apply_film(sample_watermark_features(self.watermark, points), scale, shift)
        return self.color(feats, wm, dirs)

    # ---- structural edits ---------------------------------------------------

    def with_watermark_rank(
        self, watermark_rank: int, generator: Optional[torch.Generator] = None
    ) -> "SceneModel":
        """Clone with a freshly initialized watermark branch of a different rank.

        Density, appearance and the first two color layers are copied verbatim,
        which lets rank sweeps share one pretrained scene.
        """
        spec = copy.deepcopy(self.spec)
        spec.watermark_rank = watermark_rank
        dtype = self.density.planes[0].dtype
        clone = SceneModel(spec, generator=generator, dtype=dtype)
        clone.density.load_state_dict(self.density.state_dict())
        clone.appearance.load_state_dict(self.appearance.state_dict())
        clone.color.layer1.load_state_dict(self.color.layer1.state_dict())
        clone.color.layer2.load_state_dict(self.color.layer2.state_dict())
        with torch.no_grad():
            hid = self.color.layer2.out_features
            clone.color.final.weight[:, :hid] = self.color.final.weight[:, :hid]
            clone.color.final.bias.copy_(self.color.final.bias)
        return clone

    def clone(self) -> "SceneModel":
        return copy.deepcopy(self)
