import numpy as np
import pytest

from mqoc import belavkin as bel
from mqoc import hjb_bloch as hjb
from mqoc import operators as ops
from mqoc import pontryagin as pmp
from mqoc.errors import RejectedInputError

KAPPA = 0.5
EXCITED = np.diag([0.0, 1.0]).astype(complex)
CONTROLLED = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.sqrt(KAPPA) * ops.SIGMA_Z,
                              Hc=(ops.SIGMA_Y,))


def plain_cost(weight=0.0, state_scale=0.5):
    return bel.quadratic_control_cost(state_scale * EXCITED, EXCITED, weight)


class TestGeneralizedHamiltonian:
    def test_reduces_to_running_cost(self):
        rho = hjb.density_from_bloch([0.2, 0.1, -0.3])
        cost = plain_cost()
        h = pmp.generalized_hamiltonian(0.0, [0.4], rho, np.zeros(3), np.zeros((3, 3)),
                                        CONTROLLED, cost)
        assert h == pytest.approx(cost.running_value(0.0, [0.4], rho))

    def test_paper_convention_is_minus_drift_pairing(self):
        model = ops.QuantumModel(H0=0.3 * ops.SIGMA_Z, L=np.zeros((2, 2)))
        cost = bel.CostSpec(running_op=lambda t, u: np.zeros((2, 2)),
                            terminal_op=np.zeros((2, 2)))
        r = np.array([0.4, 0.0, 0.1])
        rho = hjb.density_from_bloch(r)
        p = np.array([0.3, -0.2, 0.5])
        b, _ = hjb.bloch_dynamics(model, [], r)
        h_paper = pmp.generalized_hamiltonian(0.0, [], rho, p, np.zeros((3, 3)),
                                              model, cost, convention="paper")
        assert h_paper == pytest.approx(-float(b @ p), abs=1e-12)
        h_std = pmp.generalized_hamiltonian(0.0, [], rho, p, np.zeros((3, 3)),
                                            model, cost, convention="standard")
        assert h_std == pytest.approx(float(b @ p), abs=1e-12)

    def test_gradient_in_p_is_signed_drift(self):
        # Finite differences in p recover +drift (standard) and -drift (paper).
        rng = np.random.default_rng(3)
        cost = plain_cost(weight=0.1)
        eps = 1e-6
        for _ in range(50):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 0.95) / np.linalg.norm(r)
            rho = hjb.density_from_bloch(r)
            p = rng.normal(size=3)
            P = rng.normal(size=(3, 3))
            P = (P + P.T) / 2
            u = rng.normal(size=1)
            b, _ = hjb.bloch_dynamics(CONTROLLED, u, r)
            for conv, sign in (("standard", 1.0), ("paper", -1.0)):
                grad = np.zeros(3)
                for i in range(3):
                    dp = np.zeros(3)
                    dp[i] = eps
                    grad[i] = (
                        pmp.generalized_hamiltonian(0.0, u, rho, p + dp, P,
                                                    CONTROLLED, cost, conv)
                        - pmp.generalized_hamiltonian(0.0, u, rho, p - dp, P,
                                                      CONTROLLED, cost, conv)
                    ) / (2 * eps)
                assert np.max(np.abs(grad - sign * b)) < 1e-6


class TestMinimizeHamiltonian:
    def test_singleton(self):
        rho = hjb.density_from_bloch([0.1, 0.0, 0.2])
        u, _ = pmp.minimize_hamiltonian(0.0, rho, np.zeros(3), np.zeros((3, 3)),
                                        CONTROLLED, plain_cost(0.3), [[0.7]])
        assert np.allclose(u, [0.7])

    def test_quadratic_argmin_near_analytic(self):
        # H(u) = (1/2) w u^2 + u * (b_c . p): analytic minimizer -(b_c.p)/w.
        weight = 0.5
        cost = plain_cost(weight=weight, state_scale=0.0)
        r = np.array([0.0, 0.0, 0.5])
        rho = hjb.density_from_bloch(r)
        p = np.array([0.4, 0.0, 0.0])
        b0, _ = hjb.bloch_dynamics(CONTROLLED, [0.0], r)
        b1, _ = hjb.bloch_dynamics(CONTROLLED, [1.0], r)
        slope = (b1 - b0) @ p
        u_star = -slope / weight
        spacing = 0.25
        u_grid = [[u] for u in np.arange(-2.0, 2.0 + spacing, spacing)]
        u_best, _ = pmp.minimize_hamiltonian(0.0, rho, p, np.zeros((3, 3)),
                                             CONTROLLED, cost, u_grid)
        assert abs(u_best[0] - u_star) <= spacing

    def test_tie_break_lexicographic(self):
        rho = hjb.density_from_bloch([0.0, 0.0, 0.3])
        cost = plain_cost(weight=0.0, state_scale=0.5)
        u_grid = [[0.5], [-0.5], [0.0]]  # H independent of u here (p = 0)
        u, _ = pmp.minimize_hamiltonian(0.0, rho, np.zeros(3), np.zeros((3, 3)),
                                        CONTROLLED, cost, u_grid)
        assert np.allclose(u, [-0.5])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        rho = hjb.density_from_bloch([0.2, -0.1, 0.4])
        p = rng.normal(size=3)
        P = np.eye(3)
        cost = plain_cost(weight=0.2)
        u_grid = [[u] for u in np.linspace(-1, 1, 9)]
        ref, _ = pmp.minimize_hamiltonian(0.0, rho, p, P, CONTROLLED, cost, u_grid)
        for seed in range(5):
            shuffled = list(u_grid)
            np.random.default_rng(seed).shuffle(shuffled)
            u, _ = pmp.minimize_hamiltonian(0.0, rho, p, P, CONTROLLED, cost, shuffled)
            assert np.allclose(u, ref)

    def test_empty_grid_rejected(self):
        rho = hjb.density_from_bloch([0.0, 0.0, 0.0])
        with pytest.raises(RejectedInputError):
            pmp.minimize_hamiltonian(0.0, rho, np.zeros(3), np.zeros((3, 3)),
                                     CONTROLLED, plain_cost(), [])


class TestCostateBackwardStep:
    def test_frozen(self):
        adj = pmp.AdjointState(p=np.array([0.1, 0.2, 0.3]), q=np.zeros(3))
        out = pmp.costate_backward_step(adj, None, [0.0], 0.5, 0.01, np.zeros(3))
        assert np.allclose(out.p, adj.p)

    def test_deterministic_euler(self):
        adj = pmp.AdjointState(p=np.array([0.1, 0.2, 0.3]), q=np.zeros(3))
        grad = np.array([1.0, -1.0, 2.0])
        out = pmp.costate_backward_step(adj, None, [0.0], 0.0, 0.01, grad)
        assert np.allclose(out.p, adj.p - 0.01 * grad)

    def test_noise_term_uses_q(self):
        adj = pmp.AdjointState(p=np.zeros(3), q=np.array([1.0, 0.0, -1.0]))
        out = pmp.costate_backward_step(adj, None, [0.0], 0.2, 0.01, np.zeros(3))
        assert np.allclose(out.p, 0.2 * adj.q)


def _qubit_scenario(n_space=21, n_time=200, seed=17, T=0.1):
    cost = plain_cost(weight=0.2, state_scale=0.5)
    u_grid = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
    spec = hjb.GridSpec(T=T, n_space=n_space, n_time=n_time)
    grid = hjb.solve_hjb_grid(CONTROLLED, cost, u_grid, spec)
    policy = pmp.GridPolicy(grid, CONTROLLED, cost, u_grid)
    cfg = bel.SmeConfig(dt=T / n_time, T=T, seed=seed)
    rho0 = hjb.density_from_bloch([0.3, 0.0, 0.2])
    traj = bel.generate_record(CONTROLLED, policy, cost, cfg, rho0)
    return traj, grid, cost, u_grid


class TestFbsdeResidual:
    def test_zero_scenario_residuals_vanish(self):
        model = ops.QuantumModel(H0=np.zeros((2, 2)), L=np.zeros((2, 2)))
        cost = bel.CostSpec(running_op=lambda t, u: np.zeros((2, 2)),
                            terminal_op=np.zeros((2, 2)))
        spec = hjb.GridSpec(T=0.1, n_space=11, n_time=50)
        grid = hjb.solve_hjb_grid(model, cost, [np.zeros(0)], spec)
        cfg = bel.SmeConfig(dt=0.002, T=0.1, seed=1)
        traj = bel.generate_record(model, None, cost, cfg, np.eye(2) / 2)
        rep = pmp.fbsde_residual(traj, grid, model, cost, [np.zeros(0)])
        assert rep.terminal_residual <= 1e-9
        assert rep.max_backward_residual <= 1e-9

    def test_terminal_gradient_matches_analytic(self):
        traj, grid, cost, u_grid = _qubit_scenario()
        rep = pmp.fbsde_residual(traj, grid, CONTROLLED, cost, u_grid)
        # <rho(r), |1><1|> = (1 - r_z)/2 has exact Bloch gradient (0, 0, -1/2);
        # the terminal slice is linear in r so the stencil reproduces it.
        assert rep.terminal_residual <= grid.h ** 2

    def test_backward_leg_tracks_grid_gradient(self):
        traj, grid, cost, u_grid = _qubit_scenario()
        rep = pmp.fbsde_residual(traj, grid, CONTROLLED, cost, u_grid)
        assert rep.mean_relative_residual <= 0.10

    def test_report_roundtrip(self, tmp_path):
        traj, grid, cost, u_grid = _qubit_scenario(n_space=11, n_time=100, T=0.05)
        rep = pmp.fbsde_residual(traj, grid, CONTROLLED, cost, u_grid)
        path = tmp_path / "residuals.txt"
        rep.write(path)
        text = path.read_text()
        for key in ("terminal_residual", "max_backward_residual",
                    "mean_backward_residual", "grid_h", "dt", "convention"):
            assert key in text
