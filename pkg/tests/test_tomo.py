"""Path matrix construction, TV operator, and the L1/TV solver."""

import numpy as np
import pytest
import scipy.sparse as sp

from soscorr.geometry import ImagingGrid, TransducerArray, element_position
from soscorr.tomo import (
    ReconConfig,
    SlownessMap,
    SolverError,
    build_path_matrix,
    objective_and_grad,
    ray_weights,
    reconstruct,
    tv_operator,
)


def unit_grid(nx=10, nz=10, d=1e-3, x0=None, z0=5e-3):
    if x0 is None:
        x0 = -(nx - 1) / 2.0 * d
    return ImagingGrid(x0=x0, z0=z0, dx=d, dz=d, nx=nx, nz=nz)


class TestRayWeights:
    def test_vertical_ray_cell_lengths(self):
        g = unit_grid()
        # straight down through the column x = x0, full grid depth
        x = g.x0
        idx, lens = ray_weights((x, g.z_min), (x, g.z_max), g)
        assert idx.size == g.nz
        assert np.allclose(lens, g.dz)
        assert np.all(idx % g.nx == 0)

    def test_diagonal_ray(self):
        g = unit_grid(nx=4, nz=4)
        p0 = (g.x_min, g.z_min)
        p1 = (g.x_min + 4 * g.dx, g.z_min + 4 * g.dz)
        idx, lens = ray_weights(p0, p1, g)
        assert idx.size == 4
        assert np.allclose(lens, g.dx * np.sqrt(2.0))

    def test_zero_length_ray_is_empty(self):
        g = unit_grid()
        idx, lens = ray_weights((0.0, 0.01), (0.0, 0.01), g)
        assert idx.size == 0
        assert lens.size == 0

    def test_ray_missing_grid_is_empty(self):
        g = unit_grid()
        idx, _ = ray_weights((0.05, 0.001), (0.06, 0.002), g)
        assert idx.size == 0

    def test_row_sum_equals_clipped_euclidean_length(self):
        """1000 random rays: summed cell lengths match the in-grid span."""
        g = unit_grid(nx=12, nz=15)
        rng = np.random.default_rng(7)
        n_checked = 0
        for _ in range(1000):
            # endpoints inside the grid so the clipped span is the full ray
            p0 = (rng.uniform(g.x_min, g.x_max), rng.uniform(g.z_min, g.z_max))
            p1 = (rng.uniform(g.x_min, g.x_max), rng.uniform(g.z_min, g.z_max))
            _, lens = ray_weights(p0, p1, g)
            expected = np.hypot(p1[0] - p0[0], p1[1] - p0[1])
            if expected == 0.0:
                continue
            assert lens.sum() == pytest.approx(expected, rel=1e-9)
            n_checked += 1
        assert n_checked >= 999


class TestBuildPathMatrix:
    def setup_method(self):
        self.array = TransducerArray()
        self.slow = unit_grid(nx=8, nz=8, z0=6.5e-3, x0=-3.5e-3)
        self.meas = ImagingGrid(x0=-2e-3, z0=8e-3, dx=1e-3, dz=1e-3,
                                nx=5, nz=5)

    def test_identical_pair_gives_zero_rows(self):
        L = build_path_matrix([(60, 60)], self.meas, self.slow, None,
                              self.array)
        assert L.matrix.shape == (25, 64)
        assert abs(L.matrix).sum() == 0.0

    def test_row_equals_difference_of_rays(self):
        L = build_path_matrix([(55, 65)], self.meas, self.slow, None,
                              self.array)
        X, Z = self.meas.meshgrid()
        node = (X.ravel()[13], Z.ravel()[13])
        pa = element_position(self.array, 55)
        pb = element_position(self.array, 65)
        ia, la = ray_weights(pa, node, self.slow)
        ib, lb = ray_weights(pb, node, self.slow)
        expected = np.zeros(64)
        np.add.at(expected, ia, la)
        np.add.at(expected, ib, -lb)
        assert np.allclose(L.matrix[13].toarray().ravel(), expected,
                           atol=1e-15)

    def test_homogeneous_slowness_gives_path_difference(self):
        """L @ (const vector) = const * (|p-a| - |p-b|) per node.

        Only holds when both rays lie fully inside the slowness grid,
        so use in-grid pseudo element positions via a custom check on
        rows whose rays are unclipped: here the grid reaches z=6e-3 down
        to 14e-3 and elements sit at z=0, so rays are clipped; instead
        verify against the clipped analytic value from ray_weights sums.
        """
        L = build_path_matrix([(50, 78)], self.meas, self.slow, None,
                              self.array)
        const = 2.5e-6
        out = L.matrix @ np.full(64, const)
        X, Z = self.meas.meshgrid()
        pa = element_position(self.array, 50)
        pb = element_position(self.array, 78)
        for row in range(25):
            node = (X.ravel()[row], Z.ravel()[row])
            _, la = ray_weights(pa, node, self.slow)
            _, lb = ray_weights(pb, node, self.slow)
            assert out[row] == pytest.approx(const * (la.sum() - lb.sum()),
                                             rel=1e-9, abs=1e-18)

    def test_mask_drops_rows(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, :] = True
        L = build_path_matrix([(55, 65)], self.meas, self.slow, [mask],
                              self.array)
        assert L.matrix.shape[0] == 5
        assert np.array_equal(L.node_index, np.flatnonzero(mask.ravel()))
        assert np.array_equal(L.pair_index, np.zeros(5, dtype=int))

    def test_multiple_pairs_stack(self):
        pairs = [(40, 56), (56, 72), (72, 88)]
        L = build_path_matrix(pairs, self.meas, self.slow, None, self.array)
        assert L.matrix.shape[0] == 3 * 25
        assert L.pairs == ((40, 56), (56, 72), (72, 88))
        assert set(L.pair_index) == {0, 1, 2}


class TestTVOperator:
    def test_constant_map_in_nullspace(self):
        g = unit_grid(nx=6, nz=5)
        D = tv_operator(g)
        assert np.allclose(D @ np.full(30, 3.0), 0.0)

    def test_row_count(self):
        g = unit_grid(nx=6, nz=5)
        D = tv_operator(g)
        assert D.shape == ((5 - 1) * 6 + 5 * (6 - 1), 30)

    def test_impulse_touches_four_differences(self):
        g = unit_grid(nx=5, nz=5)
        D = tv_operator(g, w_axial=1.0, w_lateral=1.0)
        e = np.zeros(25)
        e[12] = 1.0  # interior cell
        v = D @ e
        assert np.count_nonzero(v) == 4
        assert np.allclose(np.abs(v[v != 0]), 1.0)

    def test_anisotropic_weights(self):
        g = unit_grid(nx=4, nz=4)
        D = tv_operator(g, w_axial=1.0, w_lateral=0.0)
        # lateral-only variation is invisible with zero lateral weight
        x = np.tile(np.arange(4.0), 4)
        assert np.allclose(D @ x, 0.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            tv_operator(unit_grid(), w_axial=-1.0)


class TestObjectiveGradient:
    def test_gradient_matches_central_differences(self):
        array = TransducerArray()
        slow = unit_grid(nx=8, nz=8, z0=6.5e-3, x0=-3.5e-3)
        meas = ImagingGrid(x0=-2e-3, z0=8e-3, dx=1e-3, dz=1e-3, nx=5, nz=5)
        L = build_path_matrix([(55, 65), (60, 70)], meas, slow, None, array)
        D = tv_operator(slow)
        rng = np.random.default_rng(1)
        n = 64
        x = rng.standard_normal(n)
        d = 1e-3 * rng.standard_normal(L.matrix.shape[0])
        lam_eff, eps, h = 0.3, 1e-3, 1e-5
        _, g = objective_and_grad(x, L.matrix, d, D, lam_eff, eps)
        g_fd = np.zeros(n)
        for i in range(n):
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fp, _ = objective_and_grad(xp, L.matrix, d, D, lam_eff, eps)
            fm, _ = objective_and_grad(xm, L.matrix, d, D, lam_eff, eps)
            g_fd[i] = (fp - fm) / (2 * h)
        # norm-based comparison: individual components may be near zero,
        # which makes a per-component relative error ill-conditioned
        assert np.linalg.norm(g_fd - g) / np.linalg.norm(g_fd) < 1e-5

    def test_zero_residual_zero_gradient(self):
        g = unit_grid(nx=3, nz=3)
        L_mat = sp.eye(9, format="csr")
        D = tv_operator(g)
        f, grad = objective_and_grad(np.zeros(9), L_mat, np.zeros(9), D,
                                     0.5, 1e-10)
        assert f == 0.0
        assert np.allclose(grad, 0.0)


class TestReconstruct:
    def make_problem(self):
        array = TransducerArray()
        slow = ImagingGrid(x0=-9.5e-3, z0=5.5e-3, dx=1e-3, dz=1e-3,
                           nx=20, nz=20)
        meas = ImagingGrid(x0=-8e-3, z0=7e-3, dx=0.5e-3, dz=0.5e-3,
                           nx=33, nz=34)
        pairs = [(40, 56), (48, 64), (56, 72), (64, 80), (72, 88), (32, 96)]
        L = build_path_matrix(pairs, meas, slow, None, array)
        D = tv_operator(slow)
        return L, D, slow

    def test_zero_delays_give_zero_map(self):
        L, D, slow = self.make_problem()
        smap, info = reconstruct(L, np.zeros(L.matrix.shape[0]), D)
        assert np.allclose(smap.values, 0.0)
        assert info.converged

    def test_noiseless_inversion_recovers_truth(self):
        """Synthetic L @ sigma* inverts within 5% relative L2 error."""
        L, D, slow = self.make_problem()
        X, Z = slow.meshgrid()
        x_true = (1e-5 * np.exp(-(((X - 1e-3) / 4e-3) ** 2
                                  + ((Z - 14e-3) / 5e-3) ** 2))).ravel()
        delays = L.matrix @ x_true
        cfg = ReconConfig(lam=1e-8, max_iter=500, grad_tol=1e-12,
                          obj_tol=1e-16)
        smap, _ = reconstruct(L, delays, D, cfg)
        rel = (np.linalg.norm(smap.values.ravel() - x_true)
               / np.linalg.norm(x_true))
        assert rel < 0.05

    def test_huge_lambda_flattens_map(self):
        L, D, slow = self.make_problem()
        X, Z = slow.meshgrid()
        x_true = (1e-5 * np.exp(-(((X) / 4e-3) ** 2
                                  + (((Z - 14e-3)) / 5e-3) ** 2))).ravel()
        delays = L.matrix @ x_true
        smap, _ = reconstruct(L, delays, D, ReconConfig(lam=1e6))
        assert np.ptp(smap.values) < 0.01 * np.ptp(x_true)

    def test_delay_length_mismatch(self):
        L, D, _ = self.make_problem()
        with pytest.raises(ValueError, match="rows"):
            reconstruct(L, np.zeros(3), D)

    def test_nonfinite_delays_raise_solver_error(self):
        L, D, _ = self.make_problem()
        delays = np.zeros(L.matrix.shape[0])
        delays[0] = np.nan
        with pytest.raises(SolverError):
            reconstruct(L, delays, D)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ReconConfig(lam=-0.1)
        with pytest.raises(ValueError):
            ReconConfig(l1_epsilon=0.0)
        with pytest.raises(ValueError):
            ReconConfig(obj_tol=0.0)


class TestSlownessMap:
    def test_to_sos_identity_at_zero(self):
        g = unit_grid(nx=3, nz=3)
        smap = SlownessMap(values=np.zeros((3, 3)), grid=g)
        assert np.allclose(smap.to_sos(1540.0), 1540.0)

    def test_to_sos_hand_value(self):
        g = unit_grid(nx=2, nz=2)
        dsig = 1.0 / 1450.0 - 1.0 / 1500.0
        smap = SlownessMap(values=np.full((2, 2), dsig), grid=g)
        assert np.allclose(smap.to_sos(1500.0), 1450.0)

    def test_out_of_band_warns_and_clamps(self):
        g = unit_grid(nx=2, nz=2)
        smap = SlownessMap(values=np.full((2, 2), -2e-4), grid=g)
        with pytest.warns(RuntimeWarning):
            sos = smap.to_sos(1500.0)
        assert np.all(sos <= 1700.0)
