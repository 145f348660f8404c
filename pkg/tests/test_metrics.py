import numpy as np
import pytest

from ldmap.metrics import (centroid, centroid_displacement, dice,
                           evaluate_masks, surface_distances, surface_voxels)

# ---------------------------------------------------------------------------
# brute-force oracle: surfaces by explicit neighbor scan, distances by
# all-pairs minimization


def oracle_surface(mask):
    mask = mask.astype(bool)
    pts = []
    for idx in np.argwhere(mask):
        boundary = False
        for axis in range(mask.ndim):
            for step in (-1, 1):
                nb = idx.copy()
                nb[axis] += step
                if (nb < 0).any() or (nb >= np.array(mask.shape)).any():
                    boundary = True
                elif not mask[tuple(nb)]:
                    boundary = True
        if boundary:
            pts.append(idx)
    return np.array(pts, dtype=float).reshape(-1, mask.ndim)


def oracle_distances(a, b):
    pa, pb = oracle_surface(a), oracle_surface(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    d_ab = d.min(axis=1)
    d_ba = d.min(axis=0)
    hd = max(d_ab.max(), d_ba.max())
    asd = (d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba))
    return hd, asd


def random_mask(rng, dims, p=0.3):
    while True:
        m = rng.random(dims) < p
        if m.any():
            return m


class TestDice:
    def test_identical(self):
        m = np.eye(5, dtype=bool)
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice(a, b) == 0.0

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert dice(z, z) == 1.0

    def test_one_empty(self):
        z = np.zeros((3, 3), bool)
        m = np.ones((3, 3), bool)
        assert dice(z, m) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, :2] = True
        b[0, 1:3] = True
        assert dice(a, b) == pytest.approx(0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = random_mask(rng, (6, 6))
            b = random_mask(rng, (6, 6))
            assert dice(a, b) == dice(b, a)


class TestSurfaceDistances:
    def test_oracle_equivalence_2d(self):
        rng = np.random.default_rng(1)
        for _ in range(120):
            dims = tuple(rng.integers(2, 13, 2))
            a = random_mask(rng, dims)
            b = random_mask(rng, dims)
            hd, asd = surface_distances(a, b)
            hd0, asd0 = oracle_distances(a, b)
            assert hd == pytest.approx(hd0, abs=1e-10)
            assert asd == pytest.approx(asd0, abs=1e-10)

    def test_oracle_equivalence_3d(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            dims = tuple(rng.integers(2, 9, 3))
            a = random_mask(rng, dims)
            b = random_mask(rng, dims)
            hd, asd = surface_distances(a, b)
            hd0, asd0 = oracle_distances(a, b)
            assert hd == pytest.approx(hd0, abs=1e-10)
            assert asd == pytest.approx(asd0, abs=1e-10)

    def test_surface_oracle_equivalence(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dims = tuple(rng.integers(2, 13, 2))
            m = random_mask(rng, dims)
            got = {tuple(p) for p in surface_voxels(m)}
            want = {tuple(p) for p in oracle_surface(m)}
            assert got == want

    def test_identity_zero(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = random_mask(rng, (8, 8))
            hd, asd = surface_distances(m, m)
            assert hd == 0.0 and asd == 0.0

    def test_asd_at_most_hausdorff(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            dims = tuple(rng.integers(2, 11, 2))
            a = random_mask(rng, dims)
            b = random_mask(rng, dims)
            hd, asd = surface_distances(a, b)
            assert asd <= hd + 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a = random_mask(rng, (7, 7))
            b = random_mask(rng, (7, 7))
            assert surface_distances(a, b) == surface_distances(b, a)

    def test_empty_mask_rejected(self):
        z = np.zeros((3, 3), bool)
        m = np.ones((3, 3), bool)
        with pytest.raises(ValueError):
            surface_distances(z, m)

    def test_interior_excluded(self):
        m = np.zeros((5, 5), bool)
        m[1:4, 1:4] = True
        assert len(surface_voxels(m)) == 8  # ring only, center is interior

    def test_grid_boundary_is_surface(self):
        m = np.ones((3, 3), bool)
        assert len(surface_voxels(m)) == 8  # all except the center voxel


class TestCentroid:
    def test_single_voxel_displacement(self):
        m = np.zeros((4, 4), bool)
        m[1, 2] = True
        assert np.allclose(centroid_displacement(m, (1, 2)), (0.0, 0.0))

    def test_midpoint(self):
        m = np.zeros((4, 4), bool)
        m[0, 0] = True
        m[2, 0] = True
        assert np.allclose(centroid_displacement(m, (1, 0)), (0.0, 0.0))

    def test_mean_magnitude(self):
        m = np.zeros((5, 5), bool)
        m[0, 0] = True
        m[0, 4] = True
        vec = centroid_displacement(m, (0, 0))
        assert np.linalg.norm(vec) == pytest.approx(2.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            centroid(np.zeros((3, 3), bool))


class TestEvaluateMasks:
    def test_self_report(self):
        m = np.zeros((6, 6), bool)
        m[2:4, 2:4] = True
        rep = evaluate_masks(m, m)
        assert rep.dice == 1.0
        assert rep.hausdorff == 0.0
        assert rep.asd == 0.0
        assert rep.displacement_magnitude == pytest.approx(0.0)

    def test_empty_prediction(self):
        m = np.zeros((6, 6), bool)
        t = np.zeros((6, 6), bool)
        t[1, 1] = True
        rep = evaluate_masks(m, t)
        assert rep.dice == 0.0
        assert rep.hausdorff is None
        assert rep.displacement is None

    def test_voxel_size_scaling(self):
        a = np.zeros((6, 6), bool)
        b = np.zeros((6, 6), bool)
        a[0, 0] = True
        b[0, 3] = True
        rep = evaluate_masks(a, b, voxel_size=2.0)
        assert rep.hausdorff == pytest.approx(6.0)
        assert rep.displacement_magnitude == pytest.approx(6.0)

    def test_report_roundtrips_to_dict(self):
        m = np.ones((3, 3), bool)
        d = evaluate_masks(m, m).to_dict()
        assert d["dice"] == 1.0 and d["voxel_size"] == 1.0
