import numpy as np
import pytest
import torch

from fieldmark.grids import (
    VMGrid,
    density_activation,
    sample_appearance_features,
    sample_density_feature,
    sample_watermark_features,
)

from helpers import oracle_components, random_points, seeded_grid


def test_sampling_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for case in range(12):
        res = tuple(rng.integers(2, 9, size=3))
        rank = int(rng.integers(1, 5))
        grid = seeded_grid(res, rank, seed=case)
        pts = random_points(40, ((-1, -1, -1), (1, 1, 1)), rng)
        got = grid.sample_components(torch.as_tensor(pts)).detach().numpy()
        want = oracle_components(grid, pts)
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_density_is_component_sum():
    grid = seeded_grid((5, 6, 7), 3, seed=1)
    rng = np.random.default_rng(1)
    pts = torch.as_tensor(random_points(25, ((-1, -1, -1), (1, 1, 1)), rng))
    feat = sample_density_feature(grid, pts)
    comps = grid.sample_components(pts)
    assert torch.allclose(feat, comps.sum(-1), atol=1e-12)


def test_vm_component_decomposition():
    grid = seeded_grid((4, 4, 4), 2, seed=2)
    rng = np.random.default_rng(2)
    pts = torch.as_tensor(random_points(10, ((-1, -1, -1), (1, 1, 1)), rng))
    comps = grid.sample_components(pts)
    for m in range(3):
        for r in range(2):
            single = grid.vm_component(m, r, pts)
            assert torch.allclose(single, comps[:, m * 2 + r], atol=1e-12)


def test_exact_at_grid_nodes():
    grid = seeded_grid((3, 4, 5), 2, seed=3)
    from helpers import dense_components

    dense = dense_components(grid)
    lo = grid.bounds[0].numpy()
    hi = grid.bounds[1].numpy()
    res = np.array(grid.resolution)
    idx = np.array([[0, 0, 0], [2, 3, 4], [1, 2, 2], [0, 3, 1]])
    world = lo + idx / (res - 1) * (hi - lo)
    got = grid.sample_components(torch.as_tensor(world)).detach().numpy()
    want = dense[:, idx[:, 0], idx[:, 1], idx[:, 2]].T
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_out_of_bounds_clamps_to_boundary():
    grid = seeded_grid((4, 4, 4), 2, seed=4)
    inside = torch.tensor([[1.0, 0.2, -0.3]], dtype=torch.float64)
    outside = torch.tensor([[3.5, 0.2, -0.3]], dtype=torch.float64)
    a = grid.sample_components(inside)
    b = grid.sample_components(outside)
    assert torch.allclose(a, b, atol=1e-12)


def test_appearance_projects_through_basis():
    grid = seeded_grid((4, 5, 6), 3, out_dim=7, seed=5)
    rng = np.random.default_rng(5)
    pts = torch.as_tensor(random_points(15, ((-1, -1, -1), (1, 1, 1)), rng))
    feats = sample_appearance_features(grid, pts)
    comps = grid.sample_components(pts)
    w = grid.basis.weight
    assert torch.allclose(feats, comps @ w.T, atol=1e-12)
    assert feats.shape == (15, 7)


def test_density_activation_softplus():
    x = torch.tensor([0.0, -50.0, 3.0], dtype=torch.float64)
    y = density_activation(x)
    assert float(y[0]) == pytest.approx(np.log(2.0))
    assert float(y[1]) == pytest.approx(0.0, abs=1e-12)
    assert float(y[2]) == pytest.approx(np.log1p(np.exp(3.0)))
    assert (y >= 0).all()


def test_basis_rules_enforced():
    with_basis = seeded_grid((4, 4, 4), 2, out_dim=5, seed=6)
    without = seeded_grid((4, 4, 4), 2, seed=6)
    pts = torch.zeros(2, 3, dtype=torch.float64)
    with pytest.raises(ValueError, match="basis"):
        sample_density_feature(with_basis, pts)
    with pytest.raises(ValueError, match="basis"):
        sample_watermark_features(with_basis, pts)
    with pytest.raises(ValueError, match="basis"):
        sample_appearance_features(without, pts)


def test_constructor_validation():
    with pytest.raises(ValueError, match="resolution"):
        VMGrid((1, 4, 4), 2, ((-1,) * 3, (1,) * 3))
    with pytest.raises(ValueError, match="rank"):
        VMGrid((4, 4, 4), 0, ((-1,) * 3, (1,) * 3))
    with pytest.raises(ValueError, match="bounds"):
        VMGrid((4, 4, 4), 2, ((1,) * 3, (-1,) * 3))
    with pytest.raises(ValueError, match="shape"):
        seeded_grid((4, 4, 4), 1).sample_components(torch.zeros(3, dtype=torch.float64))


def test_anisotropic_resolution_axes_line_up():
    # a grid varying along exactly one axis must be flat along the others
    grid = seeded_grid((9, 2, 2), 1, seed=7)
    with torch.no_grad():
        for m in range(3):
            grid.planes[m].zero_()
            grid.lines[m].fill_(1.0)
        # mode 0 plane covers (x, y): make it x only
        grid.planes[0][0] = torch.linspace(0, 1, 9, dtype=torch.float64)[:, None]
    xs = torch.tensor([[-1.0, 0.0, 0.0], [0.0, 0.5, -0.5], [1.0, -1.0, 1.0]],
                      dtype=torch.float64)
    vals = sample_density_feature(grid, xs)
    np.testing.assert_allclose(vals.detach().numpy(), [0.0, 0.5, 1.0], atol=1e-12)


def test_gradients_reach_all_factors():
    grid = seeded_grid((4, 4, 4), 2, seed=8, dtype=torch.float32)
    pts = torch.rand(20, 3) * 2 - 1
    loss = grid.sample_components(pts).square().sum()
    loss.backward()
    for p in grid.parameters():
        assert p.grad is not None
        assert torch.isfinite(p.grad).all()
