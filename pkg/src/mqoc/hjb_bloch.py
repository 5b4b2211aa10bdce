"""Finite-difference dynamic programming for a measured qubit in Bloch coordinates.

The qubit state rho = (I + r.sigma)/2 lives in the unit ball.  The value
function is computed by explicit backward Euler on a cubic grid masked to
the ball, with central differences inside and one-sided differences where a
neighbor leaves the ball.  Grid values outside the ball are filled from the
nearest inside node so interpolation stays well defined.
"""

from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from .errors import RejectedInputError, StabilityError

BLOCH_NORM_TOL = 1e-9
STABILITY_EPS = 1e-12

SIGN_STANDARD = "standard"
SIGN_PAPER = "paper"


def check_bloch(r):
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 3:
        raise RejectedInputError(f"Bloch vector must have 3 components, got {r.shape}")
    if np.any(np.linalg.norm(r, axis=-1) > 1.0 + BLOCH_NORM_TOL):
        raise RejectedInputError("Bloch vector lies outside the unit ball")
    return r


def bloch_from_density(rho):
    """r_i = tr(rho sigma_i); accepts stacked states (..., 2, 2)."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-1] != 2 or rho.shape[-2] != 2:
        raise RejectedInputError("bloch_from_density needs a qubit state")
    comps = [np.real(np.einsum("...ij,ji->...", rho, s)) for s in ops.PAULI]
    return np.stack(comps, axis=-1)


def density_from_bloch(r):
    """rho = (I + r.sigma)/2; accepts stacked vectors (..., 3)."""
    r = check_bloch(r)
    rho = 0.5 * (np.einsum("...k,kij->...ij", r, np.stack(ops.PAULI)) + ops.IDENTITY2)
    return rho


def bloch_dynamics(model, u, r):
    """Drift b(r, u) and diffusion s(r) of the Bloch image of the filter.

    dr = b dt + s dW reproduces the density-matrix stochastic step under the
    linear Bloch map; both vectors are computed exactly by pushing the
    matrix-valued drift and fluctuation through tr(. sigma_i).
    """
    if model.dim != 2:
        raise RejectedInputError("bloch_dynamics requires a qubit model")
    r = np.asarray(r, dtype=float)
    rho = density_from_bloch(r)
    b = bloch_from_density(ops.lindblad_drift(model, u, rho))
    s = bloch_from_density(ops.fluctuation(model.L, rho))
    return b, s


@dataclass(frozen=True)
class GridSpec:
    """Spatial/temporal resolution of the value grid and the sign convention.

    hamiltonian_sign selects how the drift enters the minimized Hamiltonian:
    'standard' uses +<b, grad S>, 'paper' flips the drift sign.
    """

    T: float
    n_space: int = 21
    n_time: int = 200
    hamiltonian_sign: str = SIGN_STANDARD
    store_every: int = 1

    def __post_init__(self):
        if self.T <= 0 or self.n_space < 5 or self.n_time < 1:
            raise RejectedInputError("GridSpec needs T > 0, n_space >= 5, n_time >= 1")
        if self.hamiltonian_sign not in (SIGN_STANDARD, SIGN_PAPER):
            raise RejectedInputError(f"unknown hamiltonian_sign {self.hamiltonian_sign!r}")
        if self.store_every < 1 or self.n_time % self.store_every:
            raise RejectedInputError("store_every must divide n_time")

    @property
    def dt(self):
        return self.T / self.n_time

    @property
    def h(self):
        return 2.0 / (self.n_space - 1)


@dataclass(eq=False)
class ValueGrid:
    """Backward-solved cost-to-go on a Bloch-ball grid."""

    time_points: np.ndarray
    axes: tuple
    values: np.ndarray  # (n_stored_times, n, n, n)
    h: float
    convention: str
    inside: np.ndarray = field(repr=False)  # (n, n, n) ball mask
    _deriv_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise RejectedInputError("value grid contains non-finite entries")

    @property
    def n_space(self):
        return len(self.axes[0])

    @property
    def T(self):
        return float(self.time_points[-1])


class _BallStencil:
    """Precomputed neighbor indexing for derivatives on the masked ball."""

    def __init__(self, n):
        axis_pts = np.linspace(-1.0, 1.0, n)
        self.n = n
        self.axes = (axis_pts, axis_pts, axis_pts)
        self.h = axis_pts[1] - axis_pts[0]
        gx, gy, gz = np.meshgrid(axis_pts, axis_pts, axis_pts, indexing="ij")
        self.points = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        self.inside_flat = np.linalg.norm(self.points, axis=1) <= 1.0 + BLOCH_NORM_TOL
        self.inside = self.inside_flat.reshape(n, n, n)
        self.inside_idx = np.where(self.inside_flat)[0]

        strides = (n * n, n, 1)
        self.pos_of_flat = np.full(n ** 3, -1)
        self.pos_of_flat[self.inside_idx] = np.arange(len(self.inside_idx))
        self.nbr = {}
        self.nbr_ok = {}
        coords = [(self.inside_idx // s) % n for s in strides]
        for ax, stride in enumerate(strides):
            c = coords[ax]
            for sign, name in ((1, "p"), (-1, "m")):
                cand = self.inside_idx + sign * stride
                ok = (c + sign >= 0) & (c + sign < n)
                cand = np.where(ok, cand, self.inside_idx)
                ok &= self.inside_flat[cand]
                self.nbr[(ax, name)] = np.where(ok, cand, self.inside_idx)
                self.nbr_ok[(ax, name)] = ok
        # Diagonal neighbors for cross second derivatives.
        self.diag = {}
        self.diag_ok = {}
        for (a, b) in ((0, 1), (0, 2), (1, 2)):
            for sa, na in ((1, "p"), (-1, "m")):
                for sb, nb in ((1, "p"), (-1, "m")):
                    cand = self.inside_idx + sa * strides[a] + sb * strides[b]
                    ok = ((coords[a] + sa >= 0) & (coords[a] + sa < n)
                          & (coords[b] + sb >= 0) & (coords[b] + sb < n))
                    cand = np.where(ok, cand, self.inside_idx)
                    ok &= self.inside_flat[cand]
                    self.diag[(a, b, na + nb)] = np.where(ok, cand, self.inside_idx)
                    self.diag_ok[(a, b, na + nb)] = ok
        self._fill_src = self._nearest_inside_map()

    def _nearest_inside_map(self):
        """For every outside node, the flat index of a nearby inside node."""
        n = self.n
        outside = np.where(~self.inside_flat)[0]
        src = np.arange(n ** 3)
        pts = self.points[outside]
        norms = np.linalg.norm(pts, axis=1)
        pulled = pts / norms[:, None]  # radial projection to the sphere
        # Snap to the nearest grid node, then search its 3x3x3 neighborhood.
        approx = np.clip(np.rint((pulled + 1.0) / self.h), 0, n - 1).astype(int)
        offsets = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1)
                            for k in (-1, 0, 1)])
        best = np.full(len(outside), -1)
        best_d = np.full(len(outside), np.inf)
        for off in offsets:
            cand = np.clip(approx + off, 0, n - 1)
            flat = cand[:, 0] * n * n + cand[:, 1] * n + cand[:, 2]
            good = self.inside_flat[flat]
            d = np.linalg.norm(self.points[flat] - pts, axis=1)
            take = good & (d < best_d)
            best[take] = flat[take]
            best_d[take] = d[take]
        # Rare corner nodes may miss: fall back to the closest inside node on
        # the pulled ray by brute force.
        missing = best < 0
        if np.any(missing):
            inside_pts = self.points[self.inside_idx]
            for i in np.where(missing)[0]:
                d = np.linalg.norm(inside_pts - pulled[i], axis=1)
                best[i] = self.inside_idx[int(np.argmin(d))]
        src[outside] = best
        return src

    def fill_outside(self, flat_values):
        return flat_values[self._fill_src]

    def first_derivative(self, s_flat, axis):
        """Central difference where both neighbors are valid, else one-sided."""
        s0 = s_flat[self.inside_idx]
        sp = s_flat[self.nbr[(axis, "p")]]
        sm = s_flat[self.nbr[(axis, "m")]]
        okp = self.nbr_ok[(axis, "p")]
        okm = self.nbr_ok[(axis, "m")]
        central = (sp - sm) / (2 * self.h)
        fwd = (sp - s0) / self.h
        bwd = (s0 - sm) / self.h
        out = np.where(okp & okm, central, np.where(okp, fwd, np.where(okm, bwd, 0.0)))
        return out

    def second_derivative(self, s_flat, axis):
        s0 = s_flat[self.inside_idx]
        sp = s_flat[self.nbr[(axis, "p")]]
        sm = s_flat[self.nbr[(axis, "m")]]
        ok = self.nbr_ok[(axis, "p")] & self.nbr_ok[(axis, "m")]
        return np.where(ok, (sp - 2 * s0 + sm) / self.h ** 2, 0.0)

    def cross_derivative(self, s_flat, a, b):
        spp = s_flat[self.diag[(a, b, "pp")]]
        smm = s_flat[self.diag[(a, b, "mm")]]
        spm = s_flat[self.diag[(a, b, "pm")]]
        smp = s_flat[self.diag[(a, b, "mp")]]
        ok = (self.diag_ok[(a, b, "pp")] & self.diag_ok[(a, b, "mm")]
              & self.diag_ok[(a, b, "pm")] & self.diag_ok[(a, b, "mp")])
        return np.where(ok, (spp + smm - spm - smp) / (4 * self.h ** 2), 0.0)


def terminal_values(cost, stencil):
    """<rho(r), M> on inside nodes, nearest-filled outside."""
    m = cost.terminal_op
    m_vec = np.array([np.real(np.trace(m @ s)) for s in ops.PAULI])
    flat = np.zeros(stencil.n ** 3)
    r_in = stencil.points[stencil.inside_idx]
    flat[stencil.inside_idx] = 0.5 * (np.real(np.trace(m)) + r_in @ m_vec)
    return stencil.fill_outside(flat)


def running_cost_field(cost, t, u, stencil):
    c = cost.running(t, u)
    c_vec = np.array([np.real(np.trace(c @ s)) for s in ops.PAULI])
    r_in = stencil.points[stencil.inside_idx]
    return 0.5 * (np.real(np.trace(c)) + r_in @ c_vec)


def stability_limit(model, u_grid, stencil):
    """Largest admissible explicit time step h^2 / (6 max|s|^2 + eps)."""
    r_in = stencil.points[stencil.inside_idx]
    _, s = bloch_dynamics(model, u_grid[0], r_in)
    smax2 = float(np.max(np.sum(s * s, axis=1)))
    return stencil.h ** 2 / (6.0 * smax2 + STABILITY_EPS)


def solve_hjb_grid(model, cost, u_grid, spec):
    """Backward explicit scheme for the minimized Hamiltonian over u_grid."""
    if model.dim != 2:
        raise RejectedInputError("the grid solver is qubit-only")
    u_grid = [np.atleast_1d(np.asarray(u, dtype=float)) for u in u_grid]
    if not u_grid:
        raise RejectedInputError("u_grid must be nonempty")
    stencil = _BallStencil(spec.n_space)
    dt_max = stability_limit(model, u_grid, stencil)
    if spec.dt > dt_max:
        raise StabilityError(
            f"explicit scheme unstable: dt={spec.dt:.3e} exceeds h^2/(6 max|s|^2) = "
            f"{dt_max:.3e}; increase n_time to at least {int(np.ceil(spec.T / dt_max))}")

    r_in = stencil.points[stencil.inside_idx]
    drift = []
    for u in u_grid:
        b, s = bloch_dynamics(model, u, r_in)
        drift.append(b)
    _, s = bloch_dynamics(model, u_grid[0], r_in)

    n_stored = spec.n_time // spec.store_every + 1
    n = spec.n_space
    stored = np.empty((n_stored, n, n, n))
    stored_times = np.empty(n_stored)

    flat = terminal_values(cost, stencil)
    stored[-1] = flat.reshape(n, n, n)
    stored_times[-1] = spec.T
    sign = 1.0 if spec.hamiltonian_sign == SIGN_STANDARD else -1.0

    for step in range(spec.n_time):
        t_next = spec.T - step * spec.dt
        t_now = t_next - spec.dt
        d1 = [stencil.first_derivative(flat, a) for a in range(3)]
        d2 = [stencil.second_derivative(flat, a) for a in range(3)]
        dcross = {pair: stencil.cross_derivative(flat, *pair)
                  for pair in ((0, 1), (0, 2), (1, 2))}
        diffusion = 0.5 * (s[:, 0] ** 2 * d2[0] + s[:, 1] ** 2 * d2[1]
                           + s[:, 2] ** 2 * d2[2]) \
            + s[:, 0] * s[:, 1] * dcross[(0, 1)] \
            + s[:, 0] * s[:, 2] * dcross[(0, 2)] \
            + s[:, 1] * s[:, 2] * dcross[(1, 2)]
        best = None
        for b, u in zip(drift, u_grid):
            ham = running_cost_field(cost, t_next, u, stencil) + diffusion \
                + sign * (b[:, 0] * d1[0] + b[:, 1] * d1[1] + b[:, 2] * d1[2])
            best = ham if best is None else np.minimum(best, ham)
        new_flat = np.zeros_like(flat)
        new_flat[stencil.inside_idx] = flat[stencil.inside_idx] + spec.dt * best
        flat = stencil.fill_outside(new_flat)
        k = spec.n_time - step - 1
        if k % spec.store_every == 0:
            stored[k // spec.store_every] = flat.reshape(n, n, n)
            stored_times[k // spec.store_every] = t_now

    return ValueGrid(
        time_points=stored_times,
        axes=stencil.axes,
        values=stored,
        h=stencil.h,
        convention=spec.hamiltonian_sign,
        inside=stencil.inside,
    )


class _GridGeometry:
    """Caches one stencil per grid size so repeated solves/queries stay cheap."""

    _cache = {}

    @classmethod
    def get(cls, n):
        if n not in cls._cache:
            cls._cache[n] = _BallStencil(n)
        return cls._cache[n]


_SLICE_CACHE_LIMIT = 6


def _slice_fields(grid, stencil, k):
    """Gradient (3, N_in) and Hessian (3, 3, N_in) fields of stored slice k."""
    cache = grid._deriv_cache
    if k not in cache:
        flat = grid.values[k].ravel()
        d1 = np.stack([stencil.first_derivative(flat, a) for a in range(3)])
        hess = np.zeros((3, 3, len(stencil.inside_idx)))
        for a in range(3):
            hess[a, a] = stencil.second_derivative(flat, a)
        for (a, b) in ((0, 1), (0, 2), (1, 2)):
            hess[a, b] = hess[b, a] = stencil.cross_derivative(flat, a, b)
        if len(cache) >= _SLICE_CACHE_LIMIT:
            cache.pop(next(iter(cache)))
        cache[k] = (d1, hess)
    return cache[k]


def extract_costate(grid, t, r):
    """Finite-difference costate (p, P) at (t, r) by trilinear interpolation.

    p approximates the Bloch gradient of the value function and P its
    (symmetrized) Hessian, built from central differences at the eight
    surrounding nodes; one-sided stencils take over at the ball boundary.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise RejectedInputError("r must be a single Bloch vector")
    if np.linalg.norm(r) > 1.0 + BLOCH_NORM_TOL:
        raise RejectedInputError(f"point {r} lies outside the Bloch ball")
    tp = grid.time_points
    if not (tp[0] - 1e-12 <= t <= tp[-1] + 1e-12):
        raise RejectedInputError(f"t={t} outside grid time range")
    stencil = _GridGeometry.get(grid.n_space)

    kt = int(np.clip(np.searchsorted(tp, t) - 1, 0, len(tp) - 2))
    wt = (t - tp[kt]) / (tp[kt + 1] - tp[kt])
    wt = float(np.clip(wt, 0.0, 1.0))

    n = grid.n_space
    h = grid.h
    ix = np.clip(((r + 1.0) / h).astype(int), 0, n - 2)
    frac = (r + 1.0) / h - ix

    def slice_costate(k):
        d1, hess_field = _slice_fields(grid, stencil, k)
        p_acc = np.zeros(3)
        hess_acc = np.zeros((3, 3))
        wsum = 0.0
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    weight = ((frac[0] if cx else 1 - frac[0])
                              * (frac[1] if cy else 1 - frac[1])
                              * (frac[2] if cz else 1 - frac[2]))
                    if weight == 0.0:
                        continue
                    flat_idx = (ix[0] + cx) * n * n + (ix[1] + cy) * n + (ix[2] + cz)
                    pos = stencil.pos_of_flat[flat_idx]
                    if pos < 0:
                        continue
                    p_acc += weight * d1[:, pos]
                    hess_acc += weight * hess_field[:, :, pos]
                    wsum += weight
        if wsum <= 0.0:
            raise RejectedInputError(f"no inside nodes around {r}")
        return p_acc / wsum, hess_acc / wsum

    p0, h0 = slice_costate(kt)
    if wt == 0.0:
        p, hess = p0, h0
    else:
        p1, h1 = slice_costate(kt + 1)
        p = (1 - wt) * p0 + wt * p1
        hess = (1 - wt) * h0 + wt * h1
    return p, 0.5 * (hess + hess.T)


def write_grid_csv(grid, path, times=None):
    """Flat CSV `t, rx, ry, rz, S` for the requested stored slices."""
    from .io import write_csv

    if times is None:
        times = [grid.time_points[0]]
    idx = [int(np.argmin(np.abs(grid.time_points - t))) for t in times]
    ax = grid.axes

    def rows():
        for k in idx:
            t = grid.time_points[k]
            vals = grid.values[k]
            for i, rx in enumerate(ax[0]):
                for j, ry in enumerate(ax[1]):
                    for l, rz in enumerate(ax[2]):
                        if grid.inside[i, j, l]:
                            yield (t, rx, ry, rz, vals[i, j, l])

    write_csv(path, ["t", "rx", "ry", "rz", "S"], rows())
