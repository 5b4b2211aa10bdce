"""Stochastic master equation integration and measurement-record simulation.

The filter runs on its own output: innovation increments dW are sampled
i.i.d. Normal(0, dt) from a counter-based generator, and the measurement
record is reconstructed as dy = <L + L^dag> dt + dW.  Control policies only
ever see the past record, so adaptedness holds by construction.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import operators as ops
from .errors import NumericalBlowupError, RejectedInputError
from .io import write_csv

STEP_COUNT_TOL = 1e-9


@dataclass(frozen=True)
class SmeConfig:
    """Discretization of the filtering equation: fixed-step Euler-Maruyama."""

    dt: float
    T: float
    normalize_each_step: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.dt <= self.T):
            raise RejectedInputError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > STEP_COUNT_TOL * max(1.0, ratio):
            raise RejectedInputError(f"T/dt = {ratio} does not round to an integer step count")
        if int(self.seed) < 0:
            raise RejectedInputError("seed must be a nonnegative integer")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))


@dataclass(frozen=True)
class CostSpec:
    """Linear cost: running density <rho, C(t,u)> plus terminal <rho(T), M>."""

    running_op: object  # callable (t, u) -> Hermitian PSD matrix
    terminal_op: np.ndarray

    def __post_init__(self):
        m = ops.check_hermitian(np.asarray(self.terminal_op, dtype=complex), 1e-10, "terminal_op")
        if np.min(np.linalg.eigvalsh(m)) < -1e-10:
            raise RejectedInputError("terminal_op must be positive semidefinite")
        object.__setattr__(self, "terminal_op", m)

    def running(self, t, u):
        return np.asarray(self.running_op(t, u), dtype=complex)

    def running_value(self, t, u, rho):
        return np.real(ops.expectation(rho, self.running(t, u)))

    def terminal_value(self, rho):
        return np.real(ops.expectation(rho, self.terminal_op))

    def check_at(self, t, u):
        """Spot-check Hermiticity/PSD of the running operator at one (t, u)."""
        c = self.running(t, u)
        ops.check_hermitian(c, 1e-10, "running_op(t,u)")
        if np.min(np.linalg.eigvalsh(c)) < -1e-10:
            raise RejectedInputError(f"running_op({t}, {u}) is not positive semidefinite")


def quadratic_control_cost(state_op, terminal_op, control_weight=0.0):
    """CostSpec with C(t, u) = state_op + (1/2) u^T W u * I (W = control_weight)."""
    state_op = np.asarray(state_op, dtype=complex)
    eye = np.eye(state_op.shape[-1], dtype=complex)

    def running_op(t, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        w = np.asarray(control_weight, dtype=float)
        if w.ndim < 2:
            penalty = 0.5 * float(np.sum(w * u * u))
        else:
            penalty = 0.5 * float(u @ w @ u)
        return state_op + penalty * eye

    return CostSpec(running_op=running_op, terminal_op=terminal_op)


@dataclass(frozen=True)
class TrajectoryRecord:
    """One filtered trajectory: states, controls, record y, innovations W."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    record_y: np.ndarray
    innovations_W: np.ndarray
    seed: int

    def __post_init__(self):
        n = len(self.times)
        for name in ("states", "controls", "record_y", "innovations_W"):
            if len(getattr(self, name)) != n:
                raise RejectedInputError(f"{name} length differs from times")
        if self.record_y[0] != 0.0 or self.innovations_W[0] != 0.0:
            raise RejectedInputError("record_y and innovations_W must start at 0")

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])


RecordView = namedtuple("RecordView", ["times", "y", "W"])

ZERO_CONTROL = None


class ConstantPolicy:
    """Control held at a fixed vector; safe for batched evaluation."""

    batched = True

    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))

    def __call__(self, t, rho, past):
        if rho.ndim == 2:
            return self.u
        return np.broadcast_to(self.u, (rho.shape[0],) + self.u.shape)


def noise_increments(seed, n_steps, dt):
    """Innovation increments dW ~ Normal(0, dt) from a Philox stream keyed by seed."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return rng.normal(0.0, np.sqrt(dt), size=n_steps)


def step_sme(rho, u, dW, model, cfg, step_index=None):
    """One Euler-Maruyama step rho' = rho + w dt + sigma dW (plus projection)."""
    if not np.isfinite(dW):
        raise RejectedInputError("dW must be finite")
    w = ops.lindblad_drift(model, u, rho)
    sig = ops.fluctuation(model.L, rho)
    out = rho + w * cfg.dt + sig * dW
    if not np.all(np.isfinite(out)):
        label = "step_sme" if step_index is None else f"step_sme at step {step_index}"
        raise NumericalBlowupError(f"non-finite state after {label}", step_index=step_index)
    if cfg.normalize_each_step:
        out = ops.project_physical(out)
    return out


def innovation_increment(dy, rho, L, dt):
    """dW = dy - tr(rho (L + L^dag)) dt."""
    return dy - float(np.real(ops.expectation(rho, L + ops.dagger(L)))) * dt


def _policy_controls(policy, t, rho_b, times, y_b, w_b, k, n_controls):
    """Evaluate a policy for every trajectory in the batch at step k."""
    n_traj = rho_b.shape[0]
    if policy is None:
        return np.zeros((n_traj, n_controls))
    if getattr(policy, "batched", False):
        past = RecordView(times[: k + 1], y_b[:, : k + 1], w_b[:, : k + 1])
        u = np.asarray(policy(t, rho_b, past), dtype=float)
        return np.broadcast_to(u, (n_traj, n_controls))
    out = np.empty((n_traj, n_controls))
    for i in range(n_traj):
        past = RecordView(times[: k + 1], y_b[i, : k + 1], w_b[i, : k + 1])
        out[i] = np.atleast_1d(np.asarray(policy(t, rho_b[i], past), dtype=float))
    return out


def simulate_ensemble(model, policy, cfg, rho0, seeds, keep_states=True):
    """Integrate one filtered trajectory per seed with shared vectorized steps.

    Returns (times, states, controls, record_y, innovations_W) where states is
    (n_traj, n_steps+1, d, d) if keep_states else the final slice only.
    Each trajectory's noise comes from its own counter-based stream, so results
    do not depend on batch composition or execution order.
    """
    rho0 = ops.check_density(rho0)
    if rho0.shape[-1] != model.dim:
        raise RejectedInputError("rho0 dimension does not match model")
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    n_traj = len(seeds)
    n = cfg.n_steps
    d = model.dim
    k_ctrl = model.n_controls

    dW = np.stack([noise_increments(s, n, cfg.dt) for s in seeds])  # (n_traj, n)
    times = np.linspace(0.0, cfg.T, n + 1)

    lsum = model.L + ops.dagger(model.L)
    channel_ops = [(L, ops.dagger(L), ops.dagger(L) @ L) for L in model.channels()]
    hc_stack = np.stack(model.Hc) if k_ctrl else None

    rho = np.broadcast_to(rho0, (n_traj, d, d)).copy()
    y = np.zeros((n_traj, n + 1))
    w_path = np.zeros((n_traj, n + 1))
    controls = np.zeros((n_traj, n + 1, k_ctrl))
    if keep_states:
        states = np.empty((n_traj, n + 1, d, d), dtype=complex)
        states[:, 0] = rho

    for k in range(n):
        t = times[k]
        u = _policy_controls(policy, t, rho, times, y, w_path, k, k_ctrl)
        controls[:, k] = u

        if k_ctrl:
            h = model.H0[None] + np.einsum("sk,kij->sij", u, hc_stack)
        else:
            h = model.H0[None]
        drift = (-1j / model.hbar) * (h @ rho - rho @ h)
        for L, Ld, LdL in channel_ops:
            drift = drift + L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)
        mean = np.real(np.einsum("sij,ji->s", rho, lsum))
        sig = model.L @ rho + rho @ ops.dagger(model.L) - mean[:, None, None] * rho

        rho = rho + drift * cfg.dt + sig * dW[:, k, None, None]
        total = rho.sum()
        if not (np.isfinite(total.real) and np.isfinite(total.imag)):
            bad = np.where(~np.isfinite(rho.reshape(n_traj, -1)).all(axis=1))[0]
            raise NumericalBlowupError(
                f"non-finite state after step_sme at step {k} (seed {seeds[bad[0]]})",
                step_index=k, t=float(times[k + 1]))
        if cfg.normalize_each_step:
            rho = ops.project_physical(rho)

        y[:, k + 1] = y[:, k] + mean * cfg.dt + dW[:, k]
        w_path[:, k + 1] = w_path[:, k] + dW[:, k]
        if keep_states:
            states[:, k + 1] = rho

    u_final = _policy_controls(policy, times[-1], rho, times, y, w_path, n, k_ctrl)
    controls[:, n] = u_final
    if not keep_states:
        states = rho[:, None]
    return times, states, controls, y, w_path


def generate_record(model, policy, cost, cfg, rho0):
    """Simulate one trajectory; reproducible from cfg.seed alone."""
    if cost is not None:
        cost.check_at(0.0, np.zeros(model.n_controls))
    times, states, controls, y, w_path = simulate_ensemble(
        model, policy, cfg, rho0, [cfg.seed], keep_states=True)
    return TrajectoryRecord(
        times=times,
        states=states[0],
        controls=controls[0],
        record_y=y[0],
        innovations_W=w_path[0],
        seed=int(cfg.seed),
    )


def trajectory_cost(traj, cost):
    """Left-endpoint Riemann sum of the running cost plus the terminal cost."""
    dt = traj.dt
    total = 0.0
    for k in range(traj.n_steps):
        total += cost.running_value(traj.times[k], traj.controls[k], traj.states[k]) * dt
    return total + cost.terminal_value(traj.states[-1])


def adjoint_generator(model, u, X):
    """Heisenberg-picture generator: (i/hbar)[H, X] + sum_L (L^dag X L - (1/2){L^dag L, X})."""
    h = model.hamiltonian(u)
    out = (1j / model.hbar) * (h @ X - X @ h)
    for L in model.channels():
        Ld = ops.dagger(L)
        LdL = Ld @ L
        out = out + Ld @ X @ L - 0.5 * (LdL @ X + X @ LdL)
    return out


def filter_observable_check(traj, X, model):
    """Propagate the scalar SDE for the conditional expectation of X and
    return max_t |pi_t(X) - tr(rho_t X)| against the stored states.

    The scalar recursion shares the trajectory's innovations and evaluates
    operator expectations along the stored states, but never renormalizes;
    the discrepancy therefore measures how much the per-step physicality
    projection bends the filter away from the raw conditional-expectation SDE.
    """
    X = ops.check_hermitian(np.asarray(X, dtype=complex), 1e-10, "X")
    L = model.L
    lsum = L + ops.dagger(L)
    xl = X @ L + ops.dagger(L) @ X
    dt = traj.dt
    dW = np.diff(traj.innovations_W)
    # Expectations along the stored trajectory, vectorized over time.
    gen_u = None
    gen_op = None
    gen_vals = np.empty(traj.n_steps)
    for k in range(traj.n_steps):
        u = traj.controls[k]
        if gen_op is None or not np.array_equal(u, gen_u):
            gen_op = adjoint_generator(model, u, X)
            gen_u = np.array(u, copy=True)
        gen_vals[k] = np.real(np.einsum("ij,ji->", traj.states[k], gen_op))
    xl_vals = np.real(np.einsum("tij,ji->t", traj.states[:-1], xl))
    lsum_vals = np.real(np.einsum("tij,ji->t", traj.states[:-1], lsum))
    refs = np.real(np.einsum("tij,ji->t", traj.states, X))
    m = refs[0]
    worst = 0.0
    for k in range(traj.n_steps):
        m = m + gen_vals[k] * dt + (xl_vals[k] - lsum_vals[k] * m) * dW[k]
        worst = max(worst, abs(m - refs[k + 1]))
    return worst


def trajectory_csv_header(dim, n_controls):
    cols = ["t", "y", "W"]
    cols += [f"u_{i}" for i in range(n_controls)]
    cols += [f"rho_re_{i}_{j}" for i in range(dim) for j in range(dim)]
    cols += [f"rho_im_{i}_{j}" for i in range(dim) for j in range(dim)]
    return cols


def write_trajectory_csv(traj, path):
    """One row per stored step: t, y, W, u_0..u_k, rho_re flat, rho_im flat."""
    d = traj.states.shape[-1]
    k_ctrl = traj.controls.shape[-1]
    header = trajectory_csv_header(d, k_ctrl)

    def rows():
        for i in range(len(traj.times)):
            row = [traj.times[i], traj.record_y[i], traj.innovations_W[i]]
            row += list(traj.controls[i])
            row += list(traj.states[i].real.ravel())
            row += list(traj.states[i].imag.ravel())
            yield row

    write_csv(path, header, rows())
