"""Discrete misfit functional, exact adjoint gradient, and box-constrained
projected-gradient recovery of the square-slowness field.

The misfit integrates the weighted squared data residual with the midpoint
rule in time; the gradient is the exact transpose of the implemented
forward recursion (including the parameter dependence of the weighted mass
matrix and of the initial-flux lift), so finite differences of the computed
objective reproduce it to solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem, forward


class GradientConsistencyError(RuntimeError):
    """Stored and recomputed flux histories disagree."""


@dataclass(frozen=True)
class ParamField:
    """Piecewise-constant parameter field constrained to a box.

    Feasibility (nu_lo <= value <= nu_hi on every triangle) is enforced at
    construction; use :func:`project_box` to clamp arbitrary data.
    """

    values: np.ndarray
    nu_lo: float
    nu_hi: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise ValueError("parameter field must be a flat per-triangle array")
        if not (0.0 < self.nu_lo <= self.nu_hi):
            raise ValueError("bounds must satisfy 0 < nu_lo <= nu_hi")
        if self.values.min() < self.nu_lo or self.values.max() > self.nu_hi:
            raise ValueError("parameter field violates the box bounds")

    @classmethod
    def constant(cls, mesh, value, nu_lo, nu_hi):
        return cls(np.full(mesh.num_triangles, float(value)), nu_lo, nu_hi)


def project_box(values, nu_lo, nu_hi) -> ParamField:
    """Clamp a cellwise field into the box (the L2-nearest feasible field)."""
    vals = np.clip(np.asarray(values, dtype=float), nu_lo, nu_hi)
    return ParamField(vals, nu_lo, nu_hi)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    misfit: float
    reg: float

    @property
    def total(self):
        return self.misfit + self.reg


def _misfit(space, bound, traj):
    """Midpoint-rule data misfit of a trajectory, exact in space."""
    mids = 0.5 * (traj.p[:-1] + traj.p[1:])
    total = 0.0
    for _cells, M_rec, win, obs in bound.receivers:
        Q = mids if obs is None else mids - obs
        vals = np.einsum("lm,lm->l", Q, (M_rec @ Q.T).T)
        total += 0.5 * bound.tau * float(win @ vals)
    return total


def _regularization(space, scenario, nu_cells):
    return 0.5 * scenario.lam * float(space.mesh.areas @ (nu_cells * nu_cells))


def objective(space, scenario, nu, N, bound=None, traj=None) -> ObjectiveBreakdown:
    """Evaluate the discrete objective (misfit plus Tikhonov term)."""
    b = bound if bound is not None else forward._Bound(space, scenario, N)
    nu_cells = forward._nu_values(scenario, nu, space.mesh.num_triangles)
    if traj is None:
        traj = forward.run_forward(space, scenario, nu_cells, N, bound=b, store_u=False)
    return ObjectiveBreakdown(
        misfit=_misfit(space, b, traj),
        reg=_regularization(space, scenario, nu_cells),
    )


def _misfit_seeds(space, bound, traj):
    """d(misfit)/d(p^k) for every level k, shape (N+1, n_vertices)."""
    N = traj.N
    mids = 0.5 * (traj.p[:-1] + traj.p[1:])
    seeds = np.zeros_like(traj.p)
    for _cells, M_rec, win, obs in bound.receivers:
        Q = mids if obs is None else mids - obs
        R = 0.5 * bound.tau * win[:, None] * (M_rec @ Q.T).T  # (N, M)
        seeds[:-1] += R
        seeds[1:] += R
    return seeds


def objective_and_gradient(space, scenario, nu, N, check_consistency=True):
    """Objective value and its exact per-triangle partial derivatives.

    The reverse sweep runs the transposed pressure recursion from the final
    step back to the start, pairs each adjoint state with the pressure
    difference quotient on every triangle, adds the Tikhonov term, and closes
    with the transposed initial-flux Poisson solve.  Returns
    ``(breakdown, grad)`` with ``grad[T] = dJ/d(nu_T)``.
    """
    mesh = space.mesh
    b = forward._Bound(space, scenario, N)
    nu_cells = forward._nu_values(scenario, nu, mesh.num_triangles)
    ops = forward.StepOperators(space, b.tau, nu_cells, b.eta_cells)
    traj = forward.run_forward(
        space, scenario, nu_cells, N, bound=b, ops=ops, store_u=check_consistency
    )
    if check_consistency:
        _check_flux_reconstruction(space, traj)

    breakdown = ObjectiveBreakdown(
        misfit=_misfit(space, b, traj),
        reg=_regularization(space, scenario, nu_cells),
    )

    free = space.free
    G = space.grad_matrix
    W2 = space.area_weights2
    tau = b.tau
    seeds = _misfit_seeds(space, b, traj)

    grad = scenario.lam * mesh.areas * nu_cells
    carry = np.zeros(space.dof_count)
    ubar = np.zeros(2 * mesh.num_triangles)
    w_full = np.zeros(space.dof_count)
    for l in range(N - 1, -1, -1):
        pb = seeds[l + 1] + carry - tau * (G.T @ ubar)
        w_full[:] = 0.0
        w_full[free] = ops.solver.solve(pb[free])
        grad += fem.mass_pair_cellwise(space, w_full, traj.p[l] - traj.p[l + 1]) / tau
        ubar = ubar + W2 * (G @ w_full)
        carry = ops.A_minus @ w_full
    ybar = G.T @ ubar
    z = forward.space_stiffness_solver(space).solve(ybar)
    grad += fem.mass_pair_cellwise(space, z, b.p1_nodal)
    return breakdown, grad


def gradient(space, scenario, nu, N, check_consistency=True):
    """Per-triangle partial derivatives of the discrete objective."""
    return objective_and_gradient(space, scenario, nu, N, check_consistency)[1]


def riesz_gradient(mesh, grad):
    """Gradient represented in the piecewise-constant L2 inner product.

    Dividing the raw partials by the triangle areas gives a field whose
    magnitude is stable under mesh refinement; the optimizer steps along
    this representation.
    """
    return np.asarray(grad, dtype=float) / mesh.areas


def _check_flux_reconstruction(space, traj, rtol=1e-10):
    """Verify that the flux history matches its backward reconstruction."""
    if traj.u is None or traj.N < 2:
        return
    gsum = (space.grad_matrix @ traj.p[1:-1].sum(axis=0)).reshape(-1, 2)
    u_first = traj.u[-1] + traj.tau * gsum
    scale = max(np.abs(traj.u[0]).max(), np.abs(traj.u[-1]).max(), 1e-300)
    err = np.abs(u_first - traj.u[0]).max()
    if err > rtol * max(scale, 1.0):
        raise GradientConsistencyError(
            f"flux reconstruction mismatch {err:.3e} (scale {scale:.3e})"
        )


# -- projected gradient ---------------------------------------------------------


@dataclass
class OptimOptions:
    """Projected-gradient settings (spectral step, Armijo backtracking)."""

    max_iters: int = 200
    tol: float = 1e-8
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    step_init: float = None
    step_min: float = 1e-14
    step_max: float = 1e14
    trust_center: np.ndarray = None
    trust_radius: float = None


@dataclass
class IterRecord:
    it: int
    J: float
    misfit: float
    reg: float
    pg_norm: float
    step: float
    backtracks: int
    feasible: bool = True


@dataclass
class OptimizerTrace:
    records: list = field(default_factory=list)
    status: str = "running"

    def objectives(self):
        return np.array([r.J for r in self.records])

    def rows(self):
        return [
            (r.it, r.J, r.misfit, r.reg, r.pg_norm, r.step) for r in self.records
        ]


def _pg_measure(mesh, nu_vals, direction, lo, hi):
    """Stationarity measure: L2 distance moved by one projected unit step."""
    moved = np.clip(nu_vals - direction, lo, hi) - nu_vals
    return fem.l2_norm_cells(mesh, moved)


def minimize(space, scenario, nu0: ParamField, N, opts: OptimOptions = None):
    """Projected-gradient descent over the box-constrained parameter set.

    Steps along the Riesz-represented gradient with a spectral
    (Barzilai-Borwein) step estimate and Armijo backtracking on the
    projected candidate; every accepted iterate is feasible and decreases
    the objective.  Returns the best iterate and the iteration trace.
    """
    opts = opts or OptimOptions()
    mesh = space.mesh
    lo, hi = scenario.nu_lo, scenario.nu_hi
    nu = ParamField(np.asarray(nu0.values, dtype=float).copy(), lo, hi)

    def in_ball(v):
        if opts.trust_radius is None:
            return True
        return fem.l2_norm_cells(mesh, v - opts.trust_center) <= opts.trust_radius

    if not in_ball(nu.values):
        raise ValueError("start violates the trust-radius constraint")

    trace = OptimizerTrace()
    breakdown, grad = objective_and_gradient(space, scenario, nu, N)
    direction = riesz_gradient(mesh, grad)
    measure0 = _pg_measure(mesh, nu.values, direction, lo, hi)
    tol_abs = opts.tol * max(measure0, 1e-300)

    step = opts.step_init
    if step is None:
        dmax = np.abs(direction).max()
        step = 0.1 * (hi - lo) / dmax if dmax > 0 else 1.0
    prev_vals, prev_dir = None, None

    for it in range(opts.max_iters + 1):
        measure = _pg_measure(mesh, nu.values, direction, lo, hi)
        trace.records.append(
            IterRecord(
                it=it,
                J=breakdown.total,
                misfit=breakdown.misfit,
                reg=breakdown.reg,
                pg_norm=measure,
                step=step,
                backtracks=0,
            )
        )
        if measure <= tol_abs:
            trace.status = "converged"
            return nu, trace
        if it == opts.max_iters:
            break

        if prev_vals is not None:
            dv = nu.values - prev_vals
            dd = direction - prev_dir
            denom = float(mesh.areas @ (dv * dd))
            if denom > 0:
                step = float(mesh.areas @ (dv * dv)) / denom
        step = float(np.clip(step, opts.step_min, opts.step_max))

        accepted = False
        for bt in range(opts.max_backtracks):
            cand = np.clip(nu.values - step * direction, lo, hi)
            decrease = float(grad @ (cand - nu.values))
            if decrease >= 0.0:
                # The projected step does not move: stationary point.
                trace.status = "converged"
                return nu, trace
            if not in_ball(cand):
                step *= opts.shrink
                continue
            cand_breakdown = objective(space, scenario, ParamField(cand, lo, hi), N)
            if cand_breakdown.total <= breakdown.total + opts.armijo * decrease:
                prev_vals, prev_dir = nu.values, direction
                nu = ParamField(cand, lo, hi)
                breakdown, grad = objective_and_gradient(space, scenario, nu, N)
                direction = riesz_gradient(mesh, grad)
                trace.records[-1].backtracks = bt
                accepted = True
                break
            step *= opts.shrink
        if not accepted:
            trace.status = "line_search_failed"
            return nu, trace

    trace.status = "max_iters"
    return nu, trace
