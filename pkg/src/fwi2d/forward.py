"""Forward modeling: staggered leapfrog stepper for the damped acoustic system.

The first-order unknowns are the pressure (P1, integer time levels) and the
flux (piecewise-constant vectors, half time levels).  One step solves the
variational pressure update with the consistent weighted mass matrix and
then advances the flux explicitly; the scheme is stable under the CFL bound
tau/h <= sqrt(nu_lo) / (sqrt(2) * c_inv) with the measured inverse-estimate
constant.  The initial flux is lifted from the data (eta*p0 + nu*p1) through
a discrete Poisson solve.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import fem

# Pressure magnitude beyond which a run is declared blown up.  Picked far
# below overflow so the step matrices never produce inf/NaN themselves.
BLOWUP_LIMIT = 1e150


class CflError(RuntimeError):
    """Requested step count violates the CFL bound."""


class InstabilityError(RuntimeError):
    """Leapfrog iteration blew up; carries the step index and partial run."""

    def __init__(self, step, trajectory):
        super().__init__(f"instability detected at step {step}")
        self.step = step
        self.trajectory = trajectory


# -- problem data -------------------------------------------------------------


class ZeroSource:
    """No volume forcing."""

    is_zero = True


class SeparableSource:
    """Forcing f(t, x) = profile(t) * shape(x).

    ``primitive`` is the exact antiderivative of the profile with
    primitive(0) = 0; when omitted, the running integral is computed with a
    composite Simpson rule on the step midpoints refined 4x, keeping the
    time-integration error far below the scheme error.
    """

    is_zero = False

    def __init__(self, shape, profile, primitive=None):
        self.shape = shape
        self.profile = profile
        self.primitive = primitive

    def primitive_at(self, times):
        """Integral of the profile from 0 to each (sorted) time."""
        times = np.asarray(times, dtype=float)
        if self.primitive is not None:
            return np.array([self.primitive(t) - self.primitive(0.0) for t in times])
        vals = np.zeros(len(times))
        acc, prev = 0.0, 0.0
        for k, t in enumerate(times):
            if t < prev:
                raise ValueError("times must be nondecreasing")
            grid = np.linspace(prev, t, 5)
            fy = np.array([self.profile(s) for s in grid])
            step = (t - prev) / 4.0
            acc += step / 3.0 * (fy[0] + 4 * fy[1] + 2 * fy[2] + 4 * fy[3] + fy[4])
            vals[k] = acc
            prev = t
        return vals


@dataclass(frozen=True)
class DiskWeight:
    """Indicator of a disk projected onto piecewise constants.

    The cell value is the covered area fraction, estimated from a fixed
    uniform subdivision of each triangle (4**depth congruent children).
    """

    center: tuple
    radius: float
    depth: int = 3

    def cells_on(self, mesh):
        n = 2 ** self.depth
        cent = []
        for a in range(n):
            for b in range(n - a):
                cent.append(((a + 1.0 / 3.0) / n, (b + 1.0 / 3.0) / n))
                if a + b <= n - 2:
                    cent.append(((a + 2.0 / 3.0) / n, (b + 2.0 / 3.0) / n))
        ref = np.array(cent)  # (n*n, 2) reference coordinates
        xy = mesh.corner_coords()
        v0 = xy[:, 0][:, None, :]
        e1 = (xy[:, 1] - xy[:, 0])[:, None, :]
        e2 = (xy[:, 2] - xy[:, 0])[:, None, :]
        pts = v0 + ref[None, :, 0:1] * e1 + ref[None, :, 1:2] * e2
        dx = pts[..., 0] - self.center[0]
        dy = pts[..., 1] - self.center[1]
        inside = (dx * dx + dy * dy) <= self.radius**2
        return inside.mean(axis=1)


@dataclass(frozen=True)
class Receiver:
    """Space-time observation weight plus the observed pressure.

    ``weight`` is a spatial profile (callable, :class:`DiskWeight`, or a
    bound cellwise array); ``window`` scales it in time and is sampled at the
    step midpoints only.  ``obs`` is the observed pressure: a callable
    obs(t, x, y), a bound (N, n_vertices) array of midpoint nodal fields, or
    None for zero.
    """

    weight: object
    window: object = None
    obs: object = None

    def weight_cells(self, mesh):
        if hasattr(self.weight, "cells_on"):
            w = self.weight.cells_on(mesh)
        elif callable(self.weight):
            w = fem.cell_average(mesh, self.weight)
        else:
            w = np.asarray(self.weight, dtype=float)
            if w.shape != (mesh.num_triangles,):
                raise ValueError("receiver weight array does not match the mesh")
        if (w < 0).any():
            raise ValueError("receiver weight must be nonnegative")
        return w


@dataclass(frozen=True)
class Scenario:
    """All problem data for one forward/inverse configuration.

    Spatial data may be given as callables (mesh independent, used by the
    refinement sweeps) or as arrays bound to one particular mesh.  The final
    time T is stored explicitly and the step is tau = T/N.
    """

    T: float = 1.0
    eta: object = 0.0
    source: object = field(default_factory=ZeroSource)
    p0: object = None
    p0_grad: object = None
    p1: object = None
    receivers: tuple = ()
    lam: float = 0.0
    nu_lo: float = 0.5
    nu_hi: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.nu_lo <= self.nu_hi):
            raise ValueError("bounds must satisfy 0 < nu_lo <= nu_hi")
        if self.T <= 0.0:
            raise ValueError("final time must be positive")
        if self.lam < 0.0:
            raise ValueError("regularization weight must be nonnegative")


@dataclass
class Trajectory:
    """Leapfrog output: pressures at integer levels, fluxes at half levels.

    ``p`` has shape (N+1, n_vertices); ``u`` has shape (N, K, 2) holding the
    half-level fluxes u^{1/2} .. u^{N-1/2}, or None when the run was asked
    not to store the flux history (``u_final`` always keeps the last one).
    """

    p: np.ndarray
    u: np.ndarray
    u_final: np.ndarray
    tau: float
    N: int


@dataclass(frozen=True)
class StabilityReport:
    """The five norm maxima bounded by the stability estimate."""

    max_dp: float
    max_du: float
    max_gradp: float
    max_p: float
    max_u: float

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CflReport:
    admissible: bool
    c_cfl: float
    tau: float
    tau_max: float
    ratio: float
    c_inv: float


def cfl_check(h, N, T, nu_lo, c_inv, safety=1.0) -> CflReport:
    """Evaluate the CFL bound tau/h <= safety * sqrt(nu_lo)/(sqrt(2)*c_inv)."""
    if min(h, N, T, nu_lo, c_inv) <= 0:
        raise ValueError("all CFL inputs must be positive")
    c_cfl = safety * np.sqrt(nu_lo) / (np.sqrt(2.0) * c_inv)
    tau = T / N
    return CflReport(
        admissible=bool(tau / h <= c_cfl),
        c_cfl=float(c_cfl),
        tau=float(tau),
        tau_max=float(c_cfl * h),
        ratio=float(tau / h),
        c_inv=float(c_inv),
    )


def admissible_steps(h, T, nu_lo, c_inv, safety=1.0, ratio=1.0):
    """Smallest N with tau = T/N at the given fraction of the CFL bound."""
    c_cfl = safety * np.sqrt(nu_lo) / (np.sqrt(2.0) * c_inv)
    return int(np.ceil(T / (ratio * c_cfl * h)))


# -- binding scenario data to one mesh ----------------------------------------


def _as_cells(mesh, data):
    if data is None:
        return np.zeros(mesh.num_triangles)
    if np.ndim(data) == 0 and not callable(data):
        return np.full(mesh.num_triangles, float(data))
    return fem.cell_average(mesh, data)


class _Bound:
    """Scenario data realized on one space with N time steps."""

    def __init__(self, space, scenario, N):
        self.space = space
        self.scenario = scenario
        self.N = int(N)
        if self.N < 1:
            raise ValueError("need at least one time step")
        self.tau = scenario.T / self.N
        self.t_mid = (np.arange(self.N) + 0.5) * self.tau
        mesh = space.mesh

        self.eta_cells = _as_cells(mesh, scenario.eta)
        if (self.eta_cells < 0).any():
            raise ValueError("damping must be nonnegative")
        self.p1_nodal = fem.as_nodal(space, scenario.p1)
        self.p_init = fem.h1_project(space, scenario.p0, scenario.p0_grad)

        src = scenario.source or ZeroSource()
        if getattr(src, "is_zero", False):
            self.force_mid = None
            self.prim_mid = np.zeros(self.N)
            self.shape_nodal = np.zeros(space.dof_count)
        else:
            self.shape_nodal = fem.as_nodal(space, src.shape)
            self.prim_mid = src.primitive_at(self.t_mid)
            self.force_mid = (space.mass @ self.shape_nodal)[:, None] * self.prim_mid

        self.receivers = []
        for rec in scenario.receivers:
            cells = rec.weight_cells(mesh)
            win = np.ones(self.N)
            if rec.window is not None:
                win = np.array([float(rec.window(t)) for t in self.t_mid])
                if (win < 0).any():
                    raise ValueError("receiver window must be nonnegative")
            if rec.obs is None:
                obs = None
            elif callable(rec.obs):
                xs, ys = mesh.vertices[:, 0], mesh.vertices[:, 1]
                obs = np.stack([np.asarray(rec.obs(t, xs, ys), float) for t in self.t_mid])
            else:
                obs = np.asarray(rec.obs, dtype=float)
                if obs.shape != (self.N, space.dof_count):
                    raise ValueError(
                        f"bound observations have {obs.shape}, expected "
                        f"({self.N}, {space.dof_count})"
                    )
            self.receivers.append((cells, fem.assemble_weighted_mass(space, cells), win, obs))

    def force_nodal(self, l):
        """Nodal representation of the running source integral at midpoint l."""
        return self.prim_mid[l] * self.shape_nodal

    def force_vec(self, l):
        """Load vector (tested source integral) at midpoint l, full length."""
        if self.force_mid is None:
            return None
        return self.force_mid[:, l]


def _nu_values(scenario, nu, n_cells):
    vals = np.asarray(getattr(nu, "values", nu), dtype=float)
    if vals.ndim == 0:
        vals = np.full(n_cells, float(vals))
    if vals.shape != (n_cells,):
        raise ValueError(f"parameter field has {vals.shape}, expected ({n_cells},)")
    eps = 1e-12 * max(1.0, scenario.nu_hi)
    if vals.min() < scenario.nu_lo - eps or vals.max() > scenario.nu_hi + eps:
        raise ValueError("parameter field violates the box bounds")
    return vals


def initial_flux(space, scenario, nu, bound=None):
    """Lift the initial data to the half-step flux via a Poisson solve.

    Solves (grad y, grad phi) = (eta*p0 + nu*p1, phi) over the constrained
    P1 space and returns the elementwise gradient of y.  Without a Dirichlet
    part the right-hand side is compatibility-corrected (mean removed) and
    the mean-zero solution is used; the returned gradient does not depend on
    that choice.
    """
    b = _Bound(space, scenario, 1) if bound is None else bound
    nu_cells = _nu_values(scenario, nu, space.mesh.num_triangles)
    rhs = fem.weighted_mass_apply(space, b.eta_cells, b.p_init) + fem.weighted_mass_apply(
        space, nu_cells, b.p1_nodal
    )
    y = space_stiffness_solver(space).solve(rhs)
    return (space.grad_matrix @ y).reshape(-1, 2)


_STIFF_SOLVERS = {}


def space_stiffness_solver(space):
    """Per-space cache of the factorized Poisson solve (used twice per gradient)."""
    solver = _STIFF_SOLVERS.get(id(space))
    if solver is None or solver.space is not space:
        solver = fem.StiffnessSolver(space)
        _STIFF_SOLVERS[id(space)] = solver
    return solver


class StepOperators:
    """Assembled pressure-update operators for one (nu, tau) pair.

    The implicit matrix (M_nu/tau + M_eta/2) is factorized once and reused
    across all steps; it is symmetric, so the same factorization serves the
    adjoint sweep.
    """

    def __init__(self, space, tau, nu_cells, eta_cells):
        self.space = space
        self.tau = tau
        M_nu = fem.assemble_weighted_mass(space, nu_cells)
        M_eta = fem.assemble_weighted_mass(space, eta_cells)
        free = space.free
        A_plus = (M_nu / tau + M_eta / 2.0).tocsr()
        self.A_minus = (M_nu / tau - M_eta / 2.0).tocsr()
        self.A_minus_ff = self.A_minus[free][:, free].tocsr()
        self.solver = fem.SpdSolver(A_plus[free][:, free].tocsc())


def run_forward(
    space,
    scenario,
    nu,
    N,
    allow_unstable=False,
    store_u=True,
    cfl_safety=1.0,
    bound=None,
    ops=None,
):
    """March the leapfrog scheme for N steps and return the trajectory.

    Raises :class:`CflError` when the step violates the CFL bound (unless
    ``allow_unstable``), and :class:`InstabilityError` carrying the partial
    trajectory when the iteration blows up.
    """
    b = _Bound(space, scenario, N) if bound is None else bound
    nu_cells = _nu_values(scenario, nu, space.mesh.num_triangles)
    report = cfl_check(space.mesh.h, N, scenario.T, scenario.nu_lo, space.cinv, cfl_safety)
    if not report.admissible and not allow_unstable:
        raise CflError(
            f"tau/h = {report.ratio:.6g} exceeds the bound {report.c_cfl:.6g}; "
            f"use at least N = {admissible_steps(space.mesh.h, scenario.T, scenario.nu_lo, space.cinv, cfl_safety)} steps"
        )

    tau = b.tau
    free = space.free
    if ops is None:
        ops = StepOperators(space, tau, nu_cells, b.eta_cells)

    G = space.grad_matrix
    W2 = space.area_weights2
    nK = space.mesh.num_triangles

    p = np.zeros((N + 1, space.dof_count))
    p[0] = b.p_init
    u_hist = np.zeros((N, nK, 2)) if store_u else None
    u = initial_flux(space, scenario, nu_cells, bound=b).ravel()
    if store_u:
        u_hist[0] = u.reshape(nK, 2)

    def partial(upto):
        return Trajectory(
            p=p[: upto + 1],
            u=u_hist[: max(upto, 1)] if store_u else None,
            u_final=u.reshape(nK, 2).copy(),
            tau=tau,
            N=upto,
        )

    for l in range(N):
        rhs = ops.A_minus_ff @ p[l, free] + (G.T @ (W2 * u))[free]
        fv = b.force_vec(l)
        if fv is not None:
            rhs = rhs + fv[free]
        pn = ops.solver.solve(rhs)
        if not np.all(np.isfinite(pn)) or np.abs(pn).max() > BLOWUP_LIMIT:
            raise InstabilityError(l, partial(l))
        p[l + 1, free] = pn
        if l < N - 1:
            u = u - tau * (G @ p[l + 1])
            if store_u:
                u_hist[l + 1] = u.reshape(nK, 2)

    return Trajectory(
        p=p, u=u_hist, u_final=u.reshape(nK, 2).copy(), tau=tau, N=N
    )


def twin_observations(space, scenario, nu_true, N, **kwargs):
    """Synthesize observations from a known parameter field.

    Runs the forward model with ``nu_true`` and returns a copy of the
    scenario whose receivers observe the computed midpoint pressures.
    """
    traj = run_forward(space, scenario, nu_true, N, store_u=False, **kwargs)
    mids = 0.5 * (traj.p[:-1] + traj.p[1:])
    receivers = tuple(
        dataclasses.replace(rec, obs=mids.copy()) for rec in scenario.receivers
    )
    return dataclasses.replace(scenario, receivers=receivers)


def stability_report(space, traj: Trajectory) -> StabilityReport:
    """Norm maxima of a complete trajectory (flux history required)."""
    if traj.u is None:
        raise ValueError("trajectory was run without flux storage")
    M = space.mass
    mesh = space.mesh

    def nodal_norms(P):
        return np.sqrt(np.maximum(np.einsum("lm,lm->l", P, (M @ P.T).T), 0.0))

    p_norms = nodal_norms(traj.p)
    dp = np.diff(traj.p, axis=0) / traj.tau
    dp_norms = nodal_norms(dp)

    gp = (space.grad_matrix @ traj.p.T).T.reshape(traj.N + 1, -1, 2)
    gp_sq = np.einsum("lkd,lkd,k->l", gp, gp, mesh.areas)
    gp_norms = np.sqrt(np.maximum(gp_sq, 0.0))

    u_sq = np.einsum("lkd,lkd,k->l", traj.u, traj.u, mesh.areas)
    u_norms = np.sqrt(np.maximum(u_sq, 0.0))
    du = np.diff(traj.u, axis=0) / traj.tau
    du_sq = np.einsum("lkd,lkd,k->l", du, du, mesh.areas)
    du_norms = np.sqrt(np.maximum(du_sq, 0.0))

    return StabilityReport(
        max_dp=float(dp_norms.max()) if dp_norms.size else 0.0,
        max_du=float(du_norms.max()) if du_norms.size else 0.0,
        max_gradp=float(gp_norms[1:-1].max()) if traj.N >= 2 else 0.0,
        max_p=float(p_norms.max()),
        max_u=float(u_norms.max()) if u_norms.size else 0.0,
    )


# -- time interpolants ---------------------------------------------------------


class TimeInterpolants:
    """Piecewise views of a trajectory over the closed interval [0, T].

    On each interval (t_l, t_{l+1}] the pressure view ``p_linear`` is affine
    with the step's difference-quotient slope, ``p_midpoint`` and ``p_left``
    are constant, and the flux views mirror this one half-step behind.  The
    value at t = 0 is the stored anchor, not a limit.  The data views return
    the source integral, observations, and receiver weights frozen at the
    step midpoints.
    """

    KEYS = (
        "p_linear",
        "p_midpoint",
        "p_left",
        "u_linear",
        "u_midpoint",
        "force",
        "obs",
        "weight",
    )

    def __init__(self, space, scenario, traj: Trajectory):
        if traj.u is None:
            raise ValueError("interpolants need the flux history")
        self.space = space
        self.scenario = scenario
        self.traj = traj
        self.bound = _Bound(space, scenario, traj.N)
        self.tau = traj.tau
        self.T = scenario.T
        # Slope of the flux on the first interval extends the explicit flux
        # update to l = 0.
        self._grad_p0 = (space.grad_matrix @ traj.p[0]).reshape(-1, 2)

    def _interval(self, t):
        if t < 0.0 or t > self.T * (1.0 + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        if t == 0.0:
            return -1
        return min(int(np.ceil(t / self.tau)) - 1, self.traj.N - 1)

    def p_linear(self, t):
        l = self._interval(t)
        if l < 0:
            return self.traj.p[0].copy()
        dp = (self.traj.p[l + 1] - self.traj.p[l]) / self.tau
        return self.traj.p[l] + (t - l * self.tau) * dp

    def p_midpoint(self, t):
        l = self._interval(t)
        if l < 0:
            return self.traj.p[0].copy()
        return 0.5 * (self.traj.p[l] + self.traj.p[l + 1])

    def p_left(self, t):
        l = self._interval(t)
        return self.traj.p[max(l, 0)].copy()

    def u_linear(self, t):
        l = self._interval(t)
        if l < 0:
            return self.traj.u[0].copy()
        if l == 0:
            return self.traj.u[0] - (t - self.tau) * self._grad_p0
        du = (self.traj.u[l] - self.traj.u[l - 1]) / self.tau
        return self.traj.u[l - 1] + (t - l * self.tau) * du

    def u_midpoint(self, t):
        l = self._interval(t)
        return self.traj.u[max(l, 0)].copy()

    def force(self, t):
        l = self._interval(t)
        if l < 0:
            return np.zeros(self.space.dof_count)
        return self.bound.force_nodal(l)

    def obs(self, t, i=0):
        rec = self.scenario.receivers[i]
        _, _, _, obs_mid = self.bound.receivers[i]
        l = self._interval(t)
        if l < 0:
            if callable(rec.obs):
                xs, ys = self.space.mesh.vertices.T
                return np.asarray(rec.obs(0.0, xs, ys), dtype=float)
            l = 0
        if obs_mid is None:
            return np.zeros(self.space.dof_count)
        return obs_mid[l].copy()

    def weight(self, t, i=0):
        rec = self.scenario.receivers[i]
        cells, _, win_mid, _ = self.bound.receivers[i]
        l = self._interval(t)
        if l < 0:
            w = float(rec.window(0.0)) if rec.window is not None else 1.0
            return cells * w
        return cells * win_mid[l]

    def evaluate(self, which, t, i=0):
        if which not in self.KEYS:
            raise KeyError(f"unknown interpolant {which!r}; choose from {self.KEYS}")
        fn = getattr(self, which)
        return fn(t, i) if which in ("obs", "weight") else fn(t)


def interpolate(bundle: TimeInterpolants, which, t, i=0):
    """Evaluate one interpolant view of a trajectory at time t."""
    return bundle.evaluate(which, t, i)
