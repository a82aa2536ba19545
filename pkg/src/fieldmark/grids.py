"""Vector-matrix factorized 3D feature grids.

Each grid stores, for every factorization mode, a rank-``R`` stack of 2D plane
coefficients over two axes and matching 1D line coefficients over the third.
A feature component is the product of a bilinearly interpolated plane value
and a linearly interpolated line value; the concatenation over modes and ranks
(optionally projected through a shared basis) is the grid's output.

World coordinates are mapped affinely from an axis-aligned bounding box onto
the continuous index range ``[0, res-1]`` per axis and clamped, so querying
outside the box returns the boundary value.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

# Factorization modes in fixed order: (plane axes, line axis).
MODE_AXES = (((0, 1), 2), ((0, 2), 1), ((1, 2), 0))
MODE_NAMES = ("xy", "xz", "yz")


def _bilinear_plane(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample a plane stack (R, A, B) at continuous indices u in [0,A-1], v in [0,B-1].

    Returns (N, R).
    """
    a, b = plane.shape[-2], plane.shape[-1]
    gx = 2 * v / max(b - 1, 1) - 1
    gy = 2 * u / max(a - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(
        plane.unsqueeze(0), grid, mode="bilinear",
        padding_mode="border", align_corners=True,
    )
    return out[0, :, 0, :].t()


def _linear_line(line: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Sample a line stack (R, C) at continuous indices w in [0,C-1].  Returns (N, R)."""
    c = line.shape[-1]
    gy = 2 * w / max(c - 1, 1) - 1
    grid = torch.stack([torch.zeros_like(gy), gy], dim=-1).view(1, -1, 1, 2)
    out = F.grid_sample(
        line.unsqueeze(0).unsqueeze(-1), grid, mode="bilinear",
        padding_mode="border", align_corners=True,
    )
    return out[0, :, :, 0].t()


class VMGrid(nn.Module):
    """One factorized grid (three plane stacks, three line stacks, optional basis).

    resolution : per-axis node counts (res_x, res_y, res_z), each >= 2
    rank       : components per mode (R >= 1)
    bounds     : (2, 3) world-space min/max corners
    out_dim    : if set, a bias-free linear basis maps the 3R components to out_dim
    """

    def __init__(
        self,
        resolution: Sequence[int],
        rank: int,
        bounds,
        out_dim: Optional[int] = None,
        init_scale: float = 0.1,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        resolution = tuple(int(r) for r in resolution)
        if len(resolution) != 3 or any(r < 2 for r in resolution):
            raise ValueError(f"resolution must be three values >= 2, got {resolution}")
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        bounds = torch.as_tensor(bounds, dtype=dtype).reshape(2, 3)
        if not torch.all(bounds[1] > bounds[0]):
            raise ValueError("bounds max must exceed min on every axis")
        self.resolution = resolution
        self.rank = rank
        self.register_buffer("bounds", bounds)

        planes, lines = [], []
        for (pa, pb), la in MODE_AXES:
            planes.append(nn.Parameter(init_scale * torch.randn(
                rank, resolution[pa], resolution[pb], generator=generator, dtype=dtype)))
            lines.append(nn.Parameter(init_scale * torch.randn(
                rank, resolution[la], generator=generator, dtype=dtype)))
        self.planes = nn.ParameterList(planes)
        self.lines = nn.ParameterList(lines)

        if out_dim is not None:
            self.basis = nn.Linear(3 * rank, out_dim, bias=False)
            self.basis = self.basis.to(dtype)
        else:
            self.basis = None

    @property
    def num_components(self) -> int:
        return 3 * self.rank

    def normalized_coords(self, x: torch.Tensor) -> torch.Tensor:
        """Map world points (N, 3) to clamped continuous indices in [0, res-1] per axis."""
        if x.ndim != 2 or x.shape[-1] != 3:
            raise ValueError(f"expected points of shape (N, 3), got {tuple(x.shape)}")
        lo, hi = self.bounds[0], self.bounds[1]
        res = x.new_tensor([r - 1 for r in self.resolution])
        u = (x - lo) / (hi - lo) * res
        return u.clamp(min=torch.zeros_like(res), max=res)

    def sample_components(self, x: torch.Tensor) -> torch.Tensor:
        """Raw factor products at world points: (N, 3R), modes outer, ranks inner."""
        u = self.normalized_coords(x)
        parts = []
        for m, ((pa, pb), la) in enumerate(MODE_AXES):
            pv = _bilinear_plane(self.planes[m], u[:, pa], u[:, pb])
            lv = _linear_line(self.lines[m], u[:, la])
            parts.append(pv * lv)
        return torch.cat(parts, dim=-1)

    def vm_component(self, mode: int, rank_idx: int, x: torch.Tensor) -> torch.Tensor:
        """Single plane-times-line component, for inspection and tests.  Returns (N,)."""
        if not 0 <= mode < 3:
            raise ValueError(f"mode must be 0..2, got {mode}")
        if not 0 <= rank_idx < self.rank:
            raise ValueError(f"rank_idx must be 0..{self.rank - 1}, got {rank_idx}")
        u = self.normalized_coords(x)
        (pa, pb), la = MODE_AXES[mode]
        pv = _bilinear_plane(self.planes[mode][rank_idx : rank_idx + 1], u[:, pa], u[:, pb])
        lv = _linear_line(self.lines[mode][rank_idx : rank_idx + 1], u[:, la])
        return (pv * lv)[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        comps = self.sample_components(x)
        if self.basis is not None:
            return self.basis(comps)
        return comps


def sample_density_feature(grid: VMGrid, x: torch.Tensor) -> torch.Tensor:
    """Scalar pre-activation density: sum of all components.  Grid must have no basis."""
    if grid.basis is not None:
        raise ValueError("density grids carry no basis; sum is taken over raw components")
    return grid.sample_components(x).sum(dim=-1)


def density_activation(feature: torch.Tensor) -> torch.Tensor:
    """Softplus mapping of the raw density feature onto [0, inf)."""
    return F.softplus(feature)


def sample_appearance_features(grid: VMGrid, x: torch.Tensor) -> torch.Tensor:
    """Basis-projected appearance features (N, out_dim)."""
    if grid.basis is None:
        raise ValueError("appearance grids need a basis (out_dim was not set)")
    return grid(x)


def sample_watermark_features(grid: VMGrid, x: torch.Tensor) -> torch.Tensor:
    """Raw concatenated watermark features (N, 3R); no basis by construction."""
    if grid.basis is not None:
        raise ValueError("watermark grids carry no basis; raw components are used directly")
    return grid.sample_components(x)
