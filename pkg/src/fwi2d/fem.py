"""P1/DG0 bookkeeping, sparse assembly, projections, and linear solves.

Pressure lives in the continuous piecewise-linear space on the mesh
(optionally pinned to zero on the Dirichlet boundary part); fluxes and
material coefficients live in the piecewise-constant space (one value, or
one 2-vector, per triangle).  All P1xP1 and P1xDG0 pairings are integrated
exactly with closed barycentric formulas; closed-form data is integrated
with a degree-4 rule so quadrature error stays far below discretization
error in the convergence studies.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# Relative-residual target for linear solves; the acceptance studies assume
# solver error is negligible against discretization error.
SOLVER_OPTS = {"rtol": 1e-12, "refine_steps": 2}

# Degree-4 quadrature on the reference triangle: 6 points, weights sum to 1.
_QW = np.array(
    [0.223381589678011] * 3 + [0.109951743655322] * 3
)
_QB = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)

_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""


class P1Space:
    """Degrees of freedom and cached operators for the P1 pressure space.

    Vertices incident to a Dirichlet-tagged boundary edge are masked; the
    remaining ("free") vertices carry the unknowns.  The space is immutable
    and caches the frequently reused operators.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.dirichlet_mask = mesh.dirichlet_vertex_mask()
        self.free = np.flatnonzero(~self.dirichlet_mask)
        self.dof_count = mesh.num_vertices
        xy = mesh.corner_coords()
        x, y = xy[..., 0], xy[..., 1]
        b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
        c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
        # Constant gradient of each barycentric basis function per triangle.
        self.grads = np.stack([b, c], axis=2) / (2.0 * mesh.areas)[:, None, None]
        self.grads.setflags(write=False)

    @property
    def has_dirichlet(self):
        return self.free.size < self.dof_count

    @cached_property
    def mass(self):
        """Unit-weight mass matrix (full, all vertices)."""
        return assemble_weighted_mass(self, 1.0)

    @cached_property
    def stiffness(self):
        return assemble_stiffness(self)

    @cached_property
    def grad_matrix(self):
        """Sparse map from nodal values to stacked per-triangle gradients.

        Row 2k holds the x-component on triangle k, row 2k+1 the
        y-component.
        """
        mesh = self.mesh
        K = mesh.num_triangles
        rows = np.repeat(np.arange(2 * K), 3)
        cols = np.repeat(mesh.triangles, 2, axis=0).ravel()
        vals = np.stack([self.grads[:, :, 0], self.grads[:, :, 1]], axis=1).ravel()
        G = sp.coo_matrix((vals, (rows, cols)), shape=(2 * K, self.dof_count))
        return G.tocsr()

    @cached_property
    def area_weights2(self):
        """Triangle areas repeated per gradient component (length 2K)."""
        return np.repeat(self.mesh.areas, 2)

    @cached_property
    def cinv(self):
        """Measured inverse-estimate constant for this mesh and space."""
        return estimate_inverse_constant(self)

    @cached_property
    def quad_points(self):
        """Degree-4 quadrature nodes mapped to every triangle, (K, 6, 2)."""
        return np.einsum("qi,kid->kqd", _QB, self.mesh.corner_coords())


# -- assembly -----------------------------------------------------------------


def _cell_weight(mesh, weight):
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        return np.full(mesh.num_triangles, float(w))
    if w.shape != (mesh.num_triangles,):
        raise ValueError(
            f"weight has {w.shape}, expected ({mesh.num_triangles},) or scalar"
        )
    return w


def assemble_weighted_mass(space: P1Space, weight):
    """Mass matrix with a piecewise-constant (or scalar) weight.

    Entry (i, j) is the sum over triangles of weight * integral of the
    basis-function product, which the barycentric formula gives exactly.
    """
    mesh = space.mesh
    w = _cell_weight(mesh, weight)
    tris = mesh.triangles
    vals = (mesh.areas * w)[:, None, None] * _LOCAL_MASS
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    M = sp.coo_matrix(
        (vals.ravel(), (rows, cols)), shape=(space.dof_count, space.dof_count)
    )
    return M.tocsr()


def assemble_stiffness(space: P1Space):
    """Stiffness matrix: entry (i, j) = sum_T |T| grad(phi_i).grad(phi_j)."""
    mesh = space.mesh
    tris = mesh.triangles
    local = np.einsum("kid,kjd->kij", space.grads, space.grads)
    vals = mesh.areas[:, None, None] * local
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    K = sp.coo_matrix(
        (vals.ravel(), (rows, cols)), shape=(space.dof_count, space.dof_count)
    )
    return K.tocsr()


def p1_gradient(space: P1Space, p):
    """Elementwise gradient of the P1 field with nodal values ``p``, (K, 2)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (space.dof_count,):
        raise ValueError(f"nodal vector has {p.shape}, expected ({space.dof_count},)")
    return (space.grad_matrix @ p).reshape(-1, 2)


def weighted_mass_apply(space: P1Space, weight, v):
    """Apply the weighted mass matrix without assembling it."""
    mesh = space.mesh
    w = _cell_weight(mesh, weight)
    vt = v[mesh.triangles]
    contrib = (mesh.areas * w / 12.0)[:, None] * (vt.sum(axis=1)[:, None] + vt)
    return np.bincount(
        mesh.triangles.ravel(), weights=contrib.ravel(), minlength=space.dof_count
    )


def mass_pair_cellwise(space: P1Space, a, b):
    """Per-triangle value of a^T M_loc b for nodal vectors a, b, length K.

    This is the exact integral over each triangle of the product of the two
    P1 fields.
    """
    at = a[space.mesh.triangles]
    bt = b[space.mesh.triangles]
    return (space.mesh.areas / 12.0) * (
        at.sum(axis=1) * bt.sum(axis=1) + (at * bt).sum(axis=1)
    )


# -- interpolation and projections -------------------------------------------


def nodal_interpolate(space: P1Space, fn):
    """Evaluate ``fn(x, y)`` at the mesh vertices (P1 nodal interpolation)."""
    xs, ys = space.mesh.vertices[:, 0], space.mesh.vertices[:, 1]
    vals = np.asarray(fn(xs, ys), dtype=float)
    if vals.shape != xs.shape:
        vals = np.array([fn(x, y) for x, y in zip(xs, ys)], dtype=float)
    return vals


def as_nodal(space: P1Space, data):
    """Coerce None / nodal array / callable to a nodal vector."""
    if data is None:
        return np.zeros(space.dof_count)
    if callable(data):
        return nodal_interpolate(space, data)
    arr = np.asarray(data, dtype=float)
    if arr.shape != (space.dof_count,):
        raise ValueError(f"nodal data has {arr.shape}, expected ({space.dof_count},)")
    return arr


def cell_average(mesh, v, kind="auto"):
    """L2-orthogonal projection onto piecewise constants (cell averaging).

    ``v`` may be a callable (integrated with the degree-4 rule), a nodal P1
    vector (the centroid rule is exact), or an existing cellwise vector
    (returned unchanged).  ``kind`` in {"auto", "nodal", "cells"}
    disambiguates arrays when vertex and triangle counts coincide.
    Values are never clipped here: averaging a field inside given bounds
    stays inside the bounds on every triangle.
    """
    if callable(v):
        pts = np.einsum("qi,kid->kqd", _QB, mesh.corner_coords())
        vals = np.asarray(v(pts[..., 0], pts[..., 1]), dtype=float)
        return vals @ _QW
    arr = np.asarray(v, dtype=float)
    if kind == "auto":
        if arr.shape == (mesh.num_triangles,) and arr.shape == (mesh.num_vertices,):
            raise ValueError("ambiguous array length; pass kind='nodal' or 'cells'")
        kind = "cells" if arr.shape == (mesh.num_triangles,) else "nodal"
    if kind == "cells":
        if arr.shape != (mesh.num_triangles,):
            raise ValueError(f"cell data has {arr.shape}")
        return arr.copy()
    if arr.shape != (mesh.num_vertices,):
        raise ValueError(f"nodal data has {arr.shape}")
    return arr[mesh.triangles].mean(axis=1)


def h1_project(space: P1Space, p0, p0_grad=None):
    """H1 projection onto the Dirichlet-constrained P1 space.

    Solves the symmetric positive-definite variational identity
    (grad y, grad phi) + (y, phi) = (grad p0, grad phi) + (p0, phi) over the
    free vertices; Dirichlet vertices are pinned to zero.  ``p0`` may be a
    nodal vector (exact right-hand side) or a callable; passing the gradient
    enables the quadrature path, otherwise the callable is first
    interpolated nodally.
    """
    if p0 is None:
        return np.zeros(space.dof_count)
    A = space.stiffness + space.mass
    if callable(p0) and p0_grad is not None:
        pts = space.quad_points
        vals = np.asarray(p0(pts[..., 0], pts[..., 1]), dtype=float)  # (K, 6)
        gx, gy = p0_grad(pts[..., 0], pts[..., 1])
        areas = space.mesh.areas
        # (p0, phi_j): sum_q w_q |T| p0(x_q) lambda_j(x_q)
        rhs_mass = np.einsum("kq,q,qj->kj", vals, _QW, _QB) * areas[:, None]
        gxm = np.asarray(gx) @ _QW
        gym = np.asarray(gy) @ _QW
        rhs_stiff = areas[:, None] * (
            gxm[:, None] * space.grads[:, :, 0] + gym[:, None] * space.grads[:, :, 1]
        )
        rhs = np.bincount(
            space.mesh.triangles.ravel(),
            weights=(rhs_mass + rhs_stiff).ravel(),
            minlength=space.dof_count,
        )
    else:
        nodal = as_nodal(space, p0)
        rhs = A @ nodal
    free = space.free
    y = np.zeros(space.dof_count)
    y[free] = SpdSolver(A[free][:, free].tocsc()).solve(rhs[free])
    return y


# -- inverse-estimate constant -------------------------------------------------


def estimate_inverse_constant(space: P1Space, tol=1e-8, maxiter=50000, seed=0,
                              details=False):
    """Sharp mesh constant c such that ||grad p|| <= (c/h) ||p|| on the space.

    Power iteration on the generalized eigenproblem (stiffness, mass) over
    the free vertices, with mass-inverse applications, converged to a
    relative eigenvalue tolerance.  Returns h * sqrt(lambda_max); the
    extremal eigenvector attains the bound.
    """
    free = space.free
    if free.size == 0:
        raise ValueError("space has no free degrees of freedom")
    K = space.stiffness[free][:, free].tocsc()
    M = space.mass[free][:, free].tocsc()
    msolve = SpdSolver(M)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(free.size)
    v /= np.sqrt(v @ (M @ v))
    lam = 0.0
    for it in range(maxiter):
        w = K @ v
        lam_new = float(v @ w)
        x = msolve.solve(w)
        nrm = np.sqrt(x @ (M @ x))
        if nrm == 0.0:
            raise SolverError("power iteration collapsed to the null space")
        v = x / nrm
        if it > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    else:
        raise SolverError(f"power iteration stagnated after {maxiter} iterations")
    cinv = space.mesh.h * np.sqrt(lam)
    if details:
        mode = np.zeros(space.dof_count)
        mode[free] = v
        return cinv, {"lam_max": lam, "mode": mode, "iterations": it + 1}
    return cinv


# -- norms ---------------------------------------------------------------------


def l2_norm_nodal(space: P1Space, p):
    """L2 norm of the P1 field with nodal values ``p``."""
    return float(np.sqrt(np.maximum(p @ (space.mass @ p), 0.0)))


def l2_norm_cells(mesh, c):
    """L2 norm of a piecewise-constant scalar (K,) or vector (K, 2) field."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        return float(np.sqrt((mesh.areas * c * c).sum()))
    return float(np.sqrt((mesh.areas * (c * c).sum(axis=1)).sum()))


# -- linear solvers --------------------------------------------------------------


def _check_residual(A, x, b):
    bn = float(np.linalg.norm(b))
    if bn == 0.0:
        return 0.0
    return float(np.linalg.norm(A @ x - b)) / bn


class SpdSolver:
    """Factorize once, solve many; verifies the relative residual.

    Direct sparse LU with a couple of iterative-refinement sweeps when the
    first residual misses the target.
    """

    def __init__(self, A):
        self.A = A.tocsr()
        self._lu = spla.splu(A.tocsc())

    def solve(self, b):
        x = self._lu.solve(b)
        res = _check_residual(self.A, x, b)
        for _ in range(SOLVER_OPTS["refine_steps"]):
            if res <= SOLVER_OPTS["rtol"] or not np.isfinite(res):
                break
            x = x + self._lu.solve(b - self.A @ x)
            res = _check_residual(self.A, x, b)
        if np.isfinite(res) and res > SOLVER_OPTS["rtol"]:
            raise SolverError(f"relative residual {res:.3e} above target")
        return x


def solve_spd(A, b):
    """One-shot symmetric positive-definite solve."""
    return SpdSolver(A).solve(b)


class StiffnessSolver:
    """Poisson-type solve shared by the initial-flux lift and its adjoint.

    With a Dirichlet part the free-vertex block is positive definite and is
    factorized directly.  Without one the stiffness matrix has the constant
    null vector; the solve then runs on the bordered saddle system that pins
    the mass-weighted mean to zero, which both enforces compatibility (the
    right-hand side gets its mean removed) and keeps the map from data to
    solution symmetric, so the same object serves the transpose solve in the
    adjoint sweep.
    """

    def __init__(self, space: P1Space):
        self.space = space
        K = space.stiffness
        if space.has_dirichlet:
            free = space.free
            self._solver = SpdSolver(K[free][:, free].tocsc())
            self._pure_neumann = False
        else:
            m = space.mass @ np.ones(space.dof_count)
            KKT = sp.bmat([[K, m[:, None]], [m[None, :], None]], format="csc")
            self._lu = spla.splu(KKT)
            self._KKT = KKT.tocsr()
            self._pure_neumann = True

    def solve(self, rhs_full):
        """Solve for the full nodal potential given a full right-hand side."""
        space = self.space
        if self._pure_neumann:
            b = np.concatenate([rhs_full, [0.0]])
            sol = self._lu.solve(b)
            res = _check_residual(self._KKT, sol, b)
            if np.isfinite(res) and res > SOLVER_OPTS["rtol"]:
                raise SolverError(f"relative residual {res:.3e} above target")
            return sol[:-1]
        y = np.zeros(space.dof_count)
        y[space.free] = self._solver.solve(rhs_full[space.free])
        return y


def export_operator(A, path):
    """Dump an assembled operator as matrix-market text (debug aid)."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(A))
