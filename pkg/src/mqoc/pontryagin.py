"""Generalized Hamiltonian, costate recursion, and forward-backward residuals.

Value-function gradients for the qubit are carried in the real Bloch chart:
the costate p and the noise costate q are 3-vectors, and the second-order
weight P is the 3x3 Bloch Hessian.  The sign convention flag matches the
grid solver: 'standard' puts +<b, p> in the Hamiltonian, 'paper' flips it.
"""

from dataclasses import dataclass

import numpy as np

from . import hjb_bloch as hb
from . import operators as ops
from .errors import NumericalBlowupError, RejectedInputError
from .io import write_keyvalue

FD_STEP = 1e-6


@dataclass(frozen=True)
class AdjointState:
    """First-order adjoint pair (p, q) in the Bloch chart."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise RejectedInputError("adjoint state must be finite")
        if p.shape != q.shape:
            raise RejectedInputError("p and q must share a shape")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


def _sign(convention):
    if convention == hb.SIGN_STANDARD:
        return 1.0
    if convention == hb.SIGN_PAPER:
        return -1.0
    raise RejectedInputError(f"unknown convention {convention!r}")


def _density_unchecked(r):
    # Polynomial extension of rho(r); used only for finite-difference probes
    # that may step just outside the ball.
    return 0.5 * (np.einsum("...k,kij->...ij", np.asarray(r, float),
                            np.stack(ops.PAULI)) + ops.IDENTITY2)


def _hamiltonian_bloch(t, u, r, p, P, model, cost, sign):
    rho = _density_unchecked(r)
    b = hb.bloch_from_density(ops.lindblad_drift(model, u, rho))
    s = hb.bloch_from_density(ops.fluctuation(model.L, rho))
    running = np.real(ops.expectation(rho, cost.running(t, u)))
    return float(running + sign * (b @ p) + 0.5 * (s @ P @ s))


def generalized_hamiltonian(t, u, rho, p, P, model, cost, convention=hb.SIGN_STANDARD):
    """Scalar Hamiltonian C + sign.<drift, p> + (1/2) s^T P s at a qubit state."""
    rho = ops.check_density(rho)
    if rho.shape[-1] != 2:
        raise RejectedInputError("the Bloch-chart Hamiltonian is qubit-only")
    p = np.asarray(p, dtype=float)
    P = np.asarray(P, dtype=float)
    if p.shape != (3,) or P.shape != (3, 3):
        raise RejectedInputError("p must be a 3-vector and P a 3x3 matrix")
    r = hb.bloch_from_density(rho)
    return _hamiltonian_bloch(t, u, r, p, P, model, cost, _sign(convention))


def hamiltonian_gradient_r(t, u, r, p, P, model, cost, convention=hb.SIGN_STANDARD,
                           step=FD_STEP):
    """Central finite-difference gradient of the Hamiltonian in r (p, P fixed)."""
    sign = _sign(convention)
    r = np.asarray(r, dtype=float)
    grad = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        hi = _hamiltonian_bloch(t, u, r + e, p, P, model, cost, sign)
        lo = _hamiltonian_bloch(t, u, r - e, p, P, model, cost, sign)
        grad[i] = (hi - lo) / (2 * step)
    return grad


def minimize_hamiltonian(t, rho, p, P, model, cost, u_grid, convention=hb.SIGN_STANDARD):
    """Exhaustive minimum over the control grid; ties go to the
    lexicographically smallest control vector."""
    if len(u_grid) == 0:
        raise RejectedInputError("u_grid must be nonempty")
    rho = ops.check_density(rho)
    r = hb.bloch_from_density(rho)
    sign = _sign(convention)
    grid = np.atleast_2d(np.asarray([np.atleast_1d(u) for u in u_grid], dtype=float))
    order = np.lexsort(tuple(grid[:, k] for k in range(grid.shape[1] - 1, -1, -1)))
    best_u = None
    best_h = np.inf
    for idx in order:
        u = grid[idx]
        h = _hamiltonian_bloch(t, u, r, np.asarray(p, float), np.asarray(P, float),
                               model, cost, sign)
        if h < best_h:
            best_h = h
            best_u = u
    return best_u, best_h


def costate_backward_step(adj, rho, u, dW, dt, grad_H_rho):
    """One Euler-Maruyama step of dp = -grad_H dt + q dW, going backward."""
    grad = np.asarray(grad_H_rho, dtype=float)
    p_new = adj.p - grad * dt + adj.q * dW
    if not np.all(np.isfinite(p_new)):
        raise NumericalBlowupError("non-finite costate after backward step")
    return AdjointState(p=p_new, q=adj.q)


class GridPolicy:
    """Greedy feedback from a value grid: argmin of the Hamiltonian at (t, r)."""

    batched = True

    def __init__(self, grid, model, cost, u_grid):
        self.grid = grid
        self.model = model
        self.cost = cost
        self.u_grid = [np.atleast_1d(np.asarray(u, dtype=float)) for u in u_grid]

    def __call__(self, t, rho, past):
        t = min(t, self.grid.T)
        single = rho.ndim == 2
        batch = rho[None] if single else rho
        out = np.empty((len(batch), len(self.u_grid[0])))
        for i, state in enumerate(batch):
            r = hb.bloch_from_density(state)
            r = r / max(1.0, np.linalg.norm(r))
            p, P = hb.extract_costate(self.grid, t, r)
            u, _ = minimize_hamiltonian(t, state, p, P, self.model, self.cost,
                                        self.u_grid, self.grid.convention)
            out[i] = u
        return out[0] if single else out


@dataclass(frozen=True)
class FbsdeReport:
    """Deviation of the backward-propagated costate from the grid gradient."""

    terminal_residual: float
    max_backward_residual: float
    mean_backward_residual: float
    mean_costate_norm: float
    grid_h: float
    dt: float
    convention: str

    @property
    def mean_relative_residual(self):
        if self.mean_costate_norm == 0.0:
            return 0.0
        return self.mean_backward_residual / self.mean_costate_norm

    def write(self, path):
        write_keyvalue(path, {
            "terminal_residual": self.terminal_residual,
            "max_backward_residual": self.max_backward_residual,
            "mean_backward_residual": self.mean_backward_residual,
            "mean_costate_norm": self.mean_costate_norm,
            "grid_h": self.grid_h,
            "dt": self.dt,
            "convention": self.convention,
        })


def fbsde_residual(traj, grid, model, cost, u_grid):
    """Propagate the costate backward along a recorded trajectory and compare
    it with the value-grid gradient at every step.

    The terminal residual compares the grid gradient at (T, r_T) against the
    exact Bloch gradient of the terminal cost; the backward leg starts from
    the grid gradient at T and uses the trajectory's own innovations.
    """
    if traj.states.shape[-1] != 2:
        raise RejectedInputError("fbsde_residual requires a qubit trajectory")
    n = traj.n_steps
    dt = traj.dt
    r_path = hb.bloch_from_density(traj.states)
    norms = np.linalg.norm(r_path, axis=1)
    exits = np.where(norms > 1.0 + hb.BLOCH_NORM_TOL)[0]
    if len(exits):
        raise RejectedInputError(
            f"trajectory exits the grid at t={traj.times[exits[0]]:.6g}")
    if traj.times[-1] > grid.T + 1e-9:
        raise RejectedInputError("trajectory horizon exceeds the grid horizon")

    p_ref = np.empty((n + 1, 3))
    P_ref = np.empty((n + 1, 3, 3))
    for k in range(n + 1):
        p_ref[k], P_ref[k] = hb.extract_costate(grid, traj.times[k], r_path[k])

    m_vec = np.array([np.real(np.trace(cost.terminal_op @ s)) for s in ops.PAULI])
    terminal_residual = float(np.linalg.norm(p_ref[-1] - 0.5 * m_vec))

    dW = np.diff(traj.innovations_W)
    p_prop = p_ref[-1].copy()
    residuals = np.empty(n + 1)
    residuals[-1] = 0.0
    for k in range(n - 1, -1, -1):
        r_next = r_path[k + 1]
        _, s_next = hb.bloch_dynamics(model, traj.controls[k + 1], r_next)
        q = P_ref[k + 1] @ s_next
        grad = hamiltonian_gradient_r(
            traj.times[k + 1], traj.controls[k + 1], r_next, p_prop, P_ref[k + 1],
            model, cost, grid.convention)
        # Undo the forward increment dp = -grad dt + q dW over [t_k, t_{k+1}].
        adj = costate_backward_step(AdjointState(p=p_prop, q=q), traj.states[k + 1],
                                    traj.controls[k + 1], -dW[k], -dt, grad)
        p_prop = adj.p
        residuals[k] = np.linalg.norm(p_prop - p_ref[k])

    return FbsdeReport(
        terminal_residual=terminal_residual,
        max_backward_residual=float(np.max(residuals)),
        mean_backward_residual=float(np.mean(residuals[:-1])),
        mean_costate_norm=float(np.mean(np.linalg.norm(p_ref, axis=1))),
        grid_h=grid.h,
        dt=dt,
        convention=grid.convention,
    )
