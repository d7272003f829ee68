import math

import numpy as np
import pytest

from obscbf.sampling import EpsilonGrid, augmented_box, build_epsilon_net, epsilon_grid
from obscbf.systems import Box, PolySet, RegionSpec, benchmark


def unit_square_region():
    # D x D = [0,1]^2 with n = 1
    return RegionSpec(Box([0.0], [1.0]), Box([0.4], [0.6]), (PolySet.box([0.45], [0.55]),))


def test_unit_square_example():
    ds = build_epsilon_net(unit_square_region(), 0.5, require_below_rho=False)
    assert len(ds) == 9
    assert np.all(ds.spacing <= 2 * 0.5 / math.sqrt(2))
    assert ds.grid.counts == (3, 3)
    assert ds.grid.covering_radius == pytest.approx(math.sqrt(2) / 4)
    # corners are samples
    pts = {tuple(p) for p in ds.samples}
    assert {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)} <= pts
    # brute-force probe of the covering radius
    rng = np.random.default_rng(0)
    probes = rng.uniform(0, 1, size=(20_000, 2))
    d = np.min(np.linalg.norm(probes[:, None, :] - ds.samples[None, :, :], axis=2), axis=1)
    assert d.max() <= math.sqrt(2) / 4 + 1e-12


def test_eps_not_below_rho_rejected():
    _, region, _ = benchmark("dc_motor")
    with pytest.raises(ValueError, match="rho"):
        build_epsilon_net(region, region.rho)


def test_sample_cap():
    _, region, _ = benchmark("dc_motor")
    with pytest.raises(ValueError, match="samples"):
        build_epsilon_net(region, 0.01, max_samples=1000)


def test_nonpositive_eps_rejected():
    with pytest.raises(ValueError):
        EpsilonGrid.over(Box([0.0], [1.0]), 0.0)


def test_nearest_index_matches_brute_force():
    grid = EpsilonGrid.over(Box([0.0, -1.0, 2.0], [1.0, 1.0, 2.5]), 0.2)
    pts = grid.points()
    rng = np.random.default_rng(1)
    probes = rng.uniform(grid.lo, grid.hi, size=(500, 3))
    near = grid.node(grid.nearest_index(probes))
    brute = np.min(np.linalg.norm(probes[:, None, :] - pts[None, :, :], axis=2), axis=1)
    assert np.allclose(np.linalg.norm(probes - near, axis=1), brute, rtol=0, atol=1e-15)
    idx = grid.nearest_index(probes)
    assert np.array_equal(pts[grid.flat_index(idx)], near)


def test_dc_motor_paper_granularity_covering():
    _, region, _ = benchmark("dc_motor")
    grid = epsilon_grid(region, 0.023)
    assert grid.covering_radius <= 0.023
    rng = np.random.default_rng(2)
    box = augmented_box(region)
    probes = rng.uniform(box.lo, box.hi, size=(100_000, 4))
    d = np.linalg.norm(probes - grid.node(grid.nearest_index(probes)), axis=1)
    assert d.max() <= 0.023


def test_subsets_and_labels():
    _, region, _ = benchmark("dc_motor")
    ds = build_epsilon_net(region, 0.05, require_below_rho=False)
    assert len(ds.subset("all")) == ds.grid.size
    assert not np.any(ds.in_init & ds.in_unsafe)
    init, unsafe = region.membership(ds.samples)
    assert np.array_equal(init, ds.in_init) and np.array_equal(unsafe, ds.in_unsafe)
    assert len(ds.subset("init")) == 256 and len(ds.subset("unsafe")) == 11664
    with pytest.raises(ValueError):
        ds.subset("bogus")


def test_empty_init_subset_warns():
    region = RegionSpec(Box([0.0], [1.0]), Box([0.1], [0.9]), (PolySet.box([0.51], [0.52]),))
    ds = build_epsilon_net(region, 0.09)
    with pytest.warns(UserWarning, match="X0"):
        assert len(ds.subset("init")) == 0


def test_determinism(tmp_path):
    _, region, _ = benchmark("pendulum")
    a = build_epsilon_net(region, 0.03, require_below_rho=False)
    b = build_epsilon_net(region, 0.03, require_below_rho=False)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert np.array_equal(a.in_init, b.in_init) and np.array_equal(a.in_unsafe, b.in_unsafe)
    a.to_csv(tmp_path / "a.csv", ["hdr"])
    b.to_csv(tmp_path / "b.csv", ["hdr"])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
