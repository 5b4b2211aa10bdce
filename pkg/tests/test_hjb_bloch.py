import numpy as np
import pytest

from mqoc import belavkin as bel
from mqoc import hjb_bloch as hjb
from mqoc import operators as ops
from mqoc.errors import RejectedInputError, StabilityError

KAPPA = 0.5
DEPHASING = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.sqrt(KAPPA) * ops.SIGMA_Z)


def analytic_grid(fn, n=21, T=1.0):
    """ValueGrid holding a time-independent analytic field, for stencil tests."""
    stencil = hjb._BallStencil(n)
    pts = stencil.points
    vals = fn(pts).reshape(n, n, n)
    return hjb.ValueGrid(
        time_points=np.array([0.0, T]),
        axes=stencil.axes,
        values=np.stack([vals, vals]),
        h=stencil.h,
        convention=hjb.SIGN_STANDARD,
        inside=stencil.inside,
    )


class TestBlochMaps:
    def test_ground_state(self):
        assert np.allclose(hjb.bloch_from_density(np.diag([1.0, 0.0])), [0, 0, 1])

    def test_maximally_mixed(self):
        assert np.allclose(hjb.bloch_from_density(np.eye(2) / 2), [0, 0, 0])

    def test_x_tilt(self):
        rho = (np.eye(2) + 0.3 * ops.SIGMA_X) / 2
        assert np.allclose(hjb.bloch_from_density(rho), [0.3, 0, 0])

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 1) / np.linalg.norm(r)
            rho = hjb.density_from_bloch(r)
            assert np.max(np.abs(hjb.bloch_from_density(rho) - r)) < 1e-12

    def test_rejects_outside_ball(self):
        with pytest.raises(RejectedInputError):
            hjb.density_from_bloch([1.0, 1.0, 1.0])


class TestBlochDynamics:
    def test_pure_precession(self):
        omega = 0.7
        model = ops.QuantumModel(H0=0.5 * omega * ops.SIGMA_Z, L=np.zeros((2, 2)))
        r = np.array([0.3, -0.2, 0.5])
        b, s = hjb.bloch_dynamics(model, [], r)
        assert np.allclose(b, omega * np.array([-r[1], r[0], 0.0]), atol=1e-12)
        assert np.allclose(s, 0.0, atol=1e-12)

    def test_dephasing_channel(self):
        r = np.array([0.4, 0.1, -0.3])
        b, s = hjb.bloch_dynamics(DEPHASING, [], r)
        assert np.allclose(b, [-2 * KAPPA * r[0], -2 * KAPPA * r[1], 0.0], atol=1e-12)
        root = 2 * np.sqrt(KAPPA)
        expect_s = root * np.array([-r[0] * r[2], -r[1] * r[2], 1 - r[2] ** 2])
        assert np.allclose(s, expect_s, atol=1e-12)

    def test_matches_matrix_step(self):
        # One Euler step through the Bloch map must equal the matrix-side step.
        rng = np.random.default_rng(1)
        model = ops.QuantumModel(H0=0.3 * ops.SIGMA_X, L=np.sqrt(KAPPA) * ops.SIGMA_Z,
                                 Hc=(ops.SIGMA_Y,))
        cfg = bel.SmeConfig(dt=1e-3, T=1.0, normalize_each_step=False)
        for _ in range(100):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 0.99) / np.linalg.norm(r)
            u = rng.normal(size=1)
            dW = rng.normal(0, np.sqrt(cfg.dt))
            b, s = hjb.bloch_dynamics(model, u, r)
            r_next = r + b * cfg.dt + s * dW
            rho_next = bel.step_sme(hjb.density_from_bloch(r), u, dW, model, cfg)
            assert np.max(np.abs(hjb.bloch_from_density(rho_next) - r_next)) \
                <= 1e-8 * (cfg.dt + abs(dW))


class TestSolveHjbGrid:
    def _cost(self, state_op, weight=0.0):
        return bel.quadratic_control_cost(state_op, np.zeros((2, 2)), weight)

    def test_zero_cost_gives_zero(self):
        cost = bel.CostSpec(running_op=lambda t, u: np.zeros((2, 2)),
                            terminal_op=np.zeros((2, 2)))
        spec = hjb.GridSpec(T=0.05, n_space=11, n_time=20)
        grid = hjb.solve_hjb_grid(DEPHASING, cost, [np.zeros(0)], spec)
        assert np.max(np.abs(grid.values)) < 1e-14

    def test_frozen_dynamics_keeps_terminal_cost(self):
        model = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.zeros((2, 2)))
        excited = np.diag([0.0, 1.0]).astype(complex)
        cost = bel.CostSpec(running_op=lambda t, u: np.zeros((2, 2)), terminal_op=excited)
        spec = hjb.GridSpec(T=0.05, n_space=11, n_time=20)
        grid = hjb.solve_hjb_grid(model, cost, [np.zeros(0)], spec)
        assert np.allclose(grid.values[0], grid.values[-1], atol=1e-12)

    def test_stability_guard(self):
        cost = self._cost(np.eye(2))
        spec = hjb.GridSpec(T=1.0, n_space=21, n_time=50)
        with pytest.raises(StabilityError, match="n_time"):
            hjb.solve_hjb_grid(DEPHASING, cost, [np.zeros(0)], spec)

    def test_monotone_in_control_grid(self):
        model = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.sqrt(KAPPA) * ops.SIGMA_Z,
                                 Hc=(ops.SIGMA_Y,))
        excited_pop = np.diag([0.0, 1.0]).astype(complex)
        cost = self._cost(excited_pop, weight=0.1)
        spec = hjb.GridSpec(T=0.1, n_space=11, n_time=100)
        small = hjb.solve_hjb_grid(model, cost, [[0.0]], spec)
        large = hjb.solve_hjb_grid(model, cost, [[0.0], [1.0], [-1.0]], spec)
        # Central differences are not strictly monotone, so allow scheme noise
        # well below the value scale.
        assert np.all(large.values <= small.values + 1e-5)

    def test_grid_refinement_contracts(self):
        # The control minimum bends S away from linearity, so resolution matters.
        model = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.sqrt(KAPPA) * ops.SIGMA_Z,
                                 Hc=(ops.SIGMA_Y,))
        cost = self._cost(np.diag([0.0, 1.0]).astype(complex), weight=0.2)
        u_grid = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
        r0 = np.array([0.2, 0.0, 0.4])  # a shared node of all three grids
        values = {}
        for n_space, n_time in ((11, 40), (21, 160), (41, 640)):
            spec = hjb.GridSpec(T=0.1, n_space=n_space, n_time=n_time)
            grid = hjb.solve_hjb_grid(model, cost, u_grid, spec)
            h = grid.h
            idx = tuple(int(round((c + 1.0) / h)) for c in r0)
            values[n_space] = grid.values[0][idx]
        change1 = abs(values[21] - values[11])
        change2 = abs(values[41] - values[21])
        assert change2 < change1


class TestExtractCostate:
    def test_zero_field(self):
        grid = analytic_grid(lambda pts: np.zeros(len(pts)))
        p, P = hjb.extract_costate(grid, 0.5, np.array([0.2, 0.0, 0.1]))
        assert np.allclose(p, 0) and np.allclose(P, 0)

    def test_linear_field(self):
        grid = analytic_grid(lambda pts: pts[:, 2])
        p, P = hjb.extract_costate(grid, 0.3, np.array([0.1, -0.2, 0.3]))
        assert np.allclose(p, [0, 0, 1], atol=1e-9)
        assert np.allclose(P, 0, atol=1e-9)

    def test_quadratic_field(self):
        grid = analytic_grid(lambda pts: 0.5 * np.sum(pts ** 2, axis=1))
        r = np.array([0.2, 0.1, -0.3])  # on grid nodes (h = 0.1)
        p, P = hjb.extract_costate(grid, 0.0, r)
        assert np.allclose(p, r, atol=1e-9)
        assert np.allclose(P, np.eye(3), atol=1e-7)

    def test_rejects_outside_ball(self):
        grid = analytic_grid(lambda pts: np.zeros(len(pts)))
        with pytest.raises(RejectedInputError):
            hjb.extract_costate(grid, 0.5, np.array([0.9, 0.9, 0.9]))

    def test_rejects_time_outside_range(self):
        grid = analytic_grid(lambda pts: np.zeros(len(pts)), T=1.0)
        with pytest.raises(RejectedInputError):
            hjb.extract_costate(grid, 2.0, np.zeros(3))


class TestGridCsv:
    def test_export_default_slice(self, tmp_path):
        cost = bel.CostSpec(running_op=lambda t, u: np.zeros((2, 2)),
                            terminal_op=np.diag([0.0, 1.0]).astype(complex))
        spec = hjb.GridSpec(T=0.05, n_space=11, n_time=20)
        grid = hjb.solve_hjb_grid(DEPHASING, cost, [np.zeros(0)], spec)
        path = tmp_path / "grid.csv"
        hjb.write_grid_csv(grid, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,rx,ry,rz,S"
        assert len(lines) - 1 == int(np.sum(grid.inside))
