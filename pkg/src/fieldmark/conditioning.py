"""Identity-conditioned modulation of watermark features and the color head.

A watermark ID is an integer key into a learned embedding table.  The
embedding drives a single linear layer that predicts per-channel scale and
shift applied to the sampled watermark features, and the modulated features
are concatenated into the input of the color head's final layer.  Rendering
without an ID bypasses the watermark branch entirely (the final layer sees
zeros), which is what makes unwatermarked and watermarked rendering share one
set of weights.
"""

from __future__ import annotations

import warnings
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class IdEmbedder(nn.Module):
    """Embedding table plus a small refinement MLP, one row per admissible ID."""

    def __init__(
        self,
        num_ids: int,
        embed_dim: int = 16,
        hidden_dim: int = 32,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if num_ids < 1:
            raise ValueError(f"num_ids must be >= 1, got {num_ids}")
        self.num_ids = num_ids
        self.embed_dim = embed_dim
        self.table = nn.Embedding(num_ids, embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, embed_dim),
        )
        self.to(dtype)

    def forward(self, wm_id) -> torch.Tensor:
        ids = torch.as_tensor(wm_id, dtype=torch.long, device=self.table.weight.device)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.num_ids):
            raise ValueError(f"watermark id out of range [0, {self.num_ids}): {wm_id}")
        return self.mlp(self.table(ids))


def embed_id(embedder: IdEmbedder, wm_id: int) -> torch.Tensor:
    """Embedding vector for a single integer ID.  Returns (embed_dim,)."""
    return embedder(int(wm_id))


class Modulator(nn.Module):
    """Linear map from an ID embedding to concatenated (scale, shift) vectors."""

    def __init__(self, embed_dim: int, feature_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.linear = nn.Linear(embed_dim, 2 * feature_dim)
        self.to(dtype)

    def forward(self, embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.linear(embedding)
        return out[..., : self.feature_dim], out[..., self.feature_dim :]


def compute_modulation(modulator: Modulator, embedding: torch.Tensor):
    """(scale, shift) pair for one embedding vector; scale occupies the first half."""
    return modulator(embedding)


def apply_film(
    features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor
) -> torch.Tensor:
    """Per-channel affine modulation ``scale * features + shift``.

    Identity at scale 1, shift 0.  Channel dims must agree; scale/shift
    broadcast over leading sample dims.
    """
    if features.shape[-1] != scale.shape[-1] or features.shape[-1] != shift.shape[-1]:
        raise ValueError(
            f"channel mismatch: features {features.shape[-1]}, "
            f"scale {scale.shape[-1]}, shift {shift.shape[-1]}"
        )
    return features * scale + shift


def encode_direction(dirs: torch.Tensor, num_freqs: int = 2) -> torch.Tensor:
    """Sinusoidal positional encoding of unit view directions.

    Returns the raw direction followed by sin/cos at frequencies 2^0 .. 2^(F-1),
    giving 3 + 6F channels.
    """
    enc = [dirs]
    for i in range(num_freqs):
        scaled = dirs * (2.0 ** i)
        enc.append(torch.sin(scaled))
        enc.append(torch.cos(scaled))
    return torch.cat(enc, dim=-1)


_warned_non_unit = False


def _ensure_unit(dirs: torch.Tensor) -> torch.Tensor:
    global _warned_non_unit
    norms = dirs.norm(dim=-1, keepdim=True)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
        if not _warned_non_unit:
            warnings.warn("view directions are not unit length; normalizing", stacklevel=3)
            _warned_non_unit = True
        dirs = dirs / norms.clamp_min(1e-12)
    return dirs


class ColorDecoder(nn.Module):
    """Two-hidden-layer MLP from appearance features and encoded view direction to RGB.

    Modulated watermark features enter only the final layer, concatenated with
    the last hidden activation, so the watermark branch can be detached by
    feeding zeros without retracing the rest of the network.
    """

    def __init__(
        self,
        feature_dim: int,
        watermark_dim: int,
        hidden_dim: int = 128,
        num_freqs: int = 2,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.watermark_dim = watermark_dim
        self.num_freqs = num_freqs
        in_dim = feature_dim + 3 + 6 * num_freqs
        self.layer1 = nn.Linear(in_dim, hidden_dim)
        self.layer2 = nn.Linear(hidden_dim, hidden_dim)
        self.final = nn.Linear(hidden_dim + watermark_dim, 3)
        self.to(dtype)

    def forward(
        self,
        features: torch.Tensor,
        watermark: Optional[torch.Tensor],
        dirs: torch.Tensor,
    ) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} appearance channels, got {features.shape[-1]}")
        dirs = _ensure_unit(dirs)
        h = F.relu(self.layer1(torch.cat([features, encode_direction(dirs, self.num_freqs)], dim=-1)))
        h = F.relu(self.layer2(h))
        if watermark is None:
            watermark = h.new_zeros(h.shape[:-1] + (self.watermark_dim,))
        elif watermark.shape[-1] != self.watermark_dim:
            raise ValueError(f"expected {self.watermark_dim} watermark channels, got {watermark.shape[-1]}")
        return torch.sigmoid(self.final(torch.cat([h, watermark.expand(h.shape[:-1] + (-1,))], dim=-1)))


def decode_color(
    head: ColorDecoder,
    features: torch.Tensor,
    watermark: Optional[torch.Tensor],
    dirs: torch.Tensor,
) -> torch.Tensor:
    """Point colors in [0, 1].  ``watermark=None`` renders the clean appearance."""
    return head(features, watermark, dirs)
