"""Independent numpy oracles the tests compare the library against.

Everything here is deliberately naive (dense tensors, per-point loops,
layer-by-layer math) so a failure points at the library, not the oracle.
"""

from __future__ import annotations

import numpy as np
import torch

from fieldmark.grids import MODE_AXES, VMGrid


# ---------------------------------------------------------------------------
# dense factorized-grid oracle

def dense_components(grid: VMGrid) -> np.ndarray:
    """Materialize every plane x line component on the full voxel lattice.

    Returns (3R, rx, ry, rz) float64 in the library's component order
    (modes outer, ranks inner).
    """
    rx, ry, rz = grid.resolution
    out = np.zeros((3 * grid.rank, rx, ry, rz))
    for m, ((pa, pb), la) in enumerate(MODE_AXES):
        plane = grid.planes[m].detach().cpu().numpy().astype(np.float64)
        line = grid.lines[m].detach().cpu().numpy().astype(np.float64)
        for r in range(grid.rank):
            comp = np.zeros((rx, ry, rz))
            # plane spans (axis pa, axis pb); line spans axis la
            shape = [1, 1, 1]
            shape[pa] = grid.resolution[pa]
            shape[pb] = grid.resolution[pb]
            p = plane[r].reshape(shape)
            shape = [1, 1, 1]
            shape[la] = grid.resolution[la]
            l = line[r].reshape(shape)
            comp = p * l
            out[m * grid.rank + r] = comp
    return out


def trilerp(dense: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of (C, rx, ry, rz) at clamped indices (N, 3)."""
    c = dense.shape[0]
    res = np.array(dense.shape[1:])
    u = np.clip(u, 0.0, res - 1.0)
    lo = np.floor(u).astype(int)
    lo = np.minimum(lo, res - 2)  # keep the +1 corner in range
    lo = np.maximum(lo, 0)
    f = u - lo
    out = np.zeros((u.shape[0], c))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, f[:, 0], 1 - f[:, 0])
                     * np.where(dy, f[:, 1], 1 - f[:, 1])
                     * np.where(dz, f[:, 2], 1 - f[:, 2]))
                vals = dense[:, lo[:, 0] + dx, lo[:, 1] + dy, lo[:, 2] + dz]
                out += w[:, None] * vals.T
    return out


def world_to_index(grid: VMGrid, x: np.ndarray) -> np.ndarray:
    lo = grid.bounds[0].cpu().numpy().astype(np.float64)
    hi = grid.bounds[1].cpu().numpy().astype(np.float64)
    res = np.array(grid.resolution, dtype=np.float64)
    return (x - lo) / (hi - lo) * (res - 1.0)


def oracle_components(grid: VMGrid, x: np.ndarray) -> np.ndarray:
    """(N, 3R) reference for VMGrid.sample_components."""
    dense = dense_components(grid)
    return trilerp(dense, world_to_index(grid, x))


# ---------------------------------------------------------------------------
# small-network oracles

def linear_oracle(layer: torch.nn.Linear, x: np.ndarray) -> np.ndarray:
    w = layer.weight.detach().cpu().numpy().astype(np.float64)
    out = x @ w.T
    if layer.bias is not None:
        out = out + layer.bias.detach().cpu().numpy().astype(np.float64)
    return out


def conv3x3_oracle(conv: torch.nn.Conv2d, x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution, x (Cin, H, W) float64 -> (Cout, H, W)."""
    w = conv.weight.detach().cpu().numpy().astype(np.float64)
    b = conv.bias.detach().cpu().numpy().astype(np.float64)
    cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd))
    for co in range(w.shape[0]):
        acc = np.zeros((h, wd))
        for ci in range(cin):
            for dy in range(3):
                for dx in range(3):
                    acc += w[co, ci, dy, dx] * xp[ci, dy : dy + h, dx : dx + wd]
        out[co] = acc + b[co]
    return out


def batchnorm_eval_oracle(bn: torch.nn.BatchNorm2d, x: np.ndarray) -> np.ndarray:
    mean = bn.running_mean.detach().cpu().numpy().astype(np.float64)
    var = bn.running_var.detach().cpu().numpy().astype(np.float64)
    gamma = bn.weight.detach().cpu().numpy().astype(np.float64)
    beta = bn.bias.detach().cpu().numpy().astype(np.float64)
    return ((x - mean[:, None, None]) / np.sqrt(var[:, None, None] + bn.eps)
            * gamma[:, None, None] + beta[:, None, None])


def decoder_oracle(decoder, image: np.ndarray) -> np.ndarray:
    """Layer-by-layer eval-mode forward of BitDecoder on one (3, h, w) input."""
    x = image.astype(np.float64)
    for block in decoder.blocks:
        conv, bn, _ = block
        x = conv3x3_oracle(conv, x)
        x = batchnorm_eval_oracle(bn, x)
        x = np.maximum(x, 0.0)
    x = conv3x3_oracle(decoder.project, x)
    pooled = x.mean(axis=(1, 2))
    return linear_oracle(decoder.linear, pooled[None, :])[0]


# ---------------------------------------------------------------------------
# misc

def noise_tiles(count, size, rng):
    """Clean-image family for logit statistics: uniform noise at a random
    per-tile blur level.

    One continuous family rather than a mixture of texture kinds, and with
    light tails in logit space; both are needed for whitening statistics to
    transfer between independent draws (mixtures leave cluster structure,
    heavy tails blow up the covariance estimation error).
    """
    from scipy import ndimage

    out = []
    for _ in range(count):
        sig = rng.uniform(0.0, 2.0)
        img = ndimage.gaussian_filter(rng.uniform(size=(size, size, 3)), (sig, sig, 0))
        out.append(img.astype(np.float32))
    return out


def seeded_grid(resolution, rank, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                out_dim=None, seed=0, dtype=torch.float64) -> VMGrid:
    gen = torch.Generator().manual_seed(seed)
    return VMGrid(resolution, rank, bounds, out_dim=out_dim, generator=gen, dtype=dtype)


def random_points(n, bounds, rng, margin=0.3):
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    span = hi - lo
    return rng.uniform(lo - margin * span, hi + margin * span, size=(n, 3))
