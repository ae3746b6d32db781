"""Discrete convex minimization problems and their solvers.

:class:`DiscreteProblem` assembles the energy

    I(v) = sum_T |T| [ phi(grad v|_T) - f_T * v(x_T) ]

over the Crouzeix-Raviart space (``space="cr"``, one unknown per side
midpoint) or the conforming P1 space (``space="p1"``, one unknown per
vertex), with Dirichlet values eliminated.  Two solvers are provided:

* :func:`newton_solve` -- damped Newton with Armijo backtracking on the
  energy, using the density's (possibly regularized) Hessian;
* :func:`gradient_flow_solve` -- semi-implicit discrete gradient flow: a
  lumped mass matrix damps a weighted-Laplacian (secant slope) iteration,
  which decreases the energy monotonically for the densities used here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespaces import CrFunction, P1Function, PwConstant
from .mesh import Triangulation

__all__ = ["DiscreteProblem", "SolverReport", "newton_solve",
           "gradient_flow_solve", "solve_problem", "linear_solve"]


def linear_solve(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Sparse direct solve with a backward-error check."""
    A = sp.csr_matrix(A)
    x = spla.spsolve(A, b)
    residual = np.linalg.norm(A @ x - b)
    scale = np.linalg.norm(b) + spla.norm(A, np.inf) * np.linalg.norm(x)
    if not np.isfinite(x).all() or residual > 1e-12 * (1.0 + scale):
        raise ArithmeticError(
            f"linear solve failed: residual {residual:.3e} vs scale {scale:.3e}")
    return x


class _RecycledSpdSolver:
    """Direct solves with factorization reuse for slowly varying SPD systems.

    The first system is factorized; subsequent ones are solved by conjugate
    gradients preconditioned with the retained factorization (consecutive
    gradient-flow matrices differ only through the lagged weights), and the
    factorization is refreshed once it degrades.  Every solve meets the same
    1e-12 backward-error contract as :func:`linear_solve`.
    """

    def __init__(self, refresh_after: int = 20):
        self._lu = None
        self._refresh_after = refresh_after

    def solve(self, A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
        A = sp.csc_matrix(A)
        if self._lu is None:
            return self._factor_and_solve(A, b)
        count = 0

        def _tick(_):
            nonlocal count
            count += 1

        preconditioner = spla.LinearOperator(A.shape, self._lu.solve)
        x, info = spla.cg(A, b, x0=self._lu.solve(b), rtol=1e-12, atol=0.0,
                          maxiter=200, M=preconditioner, callback=_tick)
        if info != 0:
            return self._factor_and_solve(A, b)
        if count > self._refresh_after:
            self._lu = None
        return x

    def _factor_and_solve(self, A: sp.csc_matrix, b: np.ndarray) -> np.ndarray:
        self._lu = spla.splu(A)
        x = self._lu.solve(b)
        residual = np.linalg.norm(A @ x - b)
        scale = np.linalg.norm(b) + spla.norm(A, np.inf) * np.linalg.norm(x)
        if not np.isfinite(x).all() or residual > 1e-12 * (1.0 + scale):
            raise ArithmeticError(
                f"linear solve failed: residual {residual:.3e} "
                f"vs scale {scale:.3e}")
        return x


class DiscreteProblem:
    """Energy, gradient, and Hessian of the discrete minimization problem.

    Parameters
    ----------
    mesh : the triangulation.
    density : convex density with ``phi``/``dphi``/``d2phi``/``slope_ratio``.
    load : elementwise-constant right-hand side ``f_h``.
    space : "cr" (side midpoint unknowns) or "p1" (vertex unknowns).
    dirichlet : optional full-length array of prescribed values; only the
        entries at constrained unknowns (Dirichlet sides resp. vertices) are
        used.  ``None`` means homogeneous data.
    """

    def __init__(self, mesh: Triangulation, density, load: PwConstant,
                 space: str = "cr", dirichlet=None):
        if space not in ("cr", "p1"):
            raise ValueError("space must be 'cr' or 'p1'")
        self.mesh = mesh
        self.density = density
        self.load = load
        self.space = space
        if space == "cr":
            self.dof_map = mesh.tri_sides
            self.basis_grads = -2.0 * mesh.barycentric_gradients[:, [2, 0, 1], :]
            self.num_dofs = mesh.num_sides
            fixed = mesh.dirichlet_side_mask.copy()
        else:
            self.dof_map = mesh.triangles
            self.basis_grads = mesh.barycentric_gradients
            self.num_dofs = mesh.num_vertices
            fixed = mesh.dirichlet_vertex_mask.copy()
        self.fixed_mask = fixed
        self.free_mask = ~fixed
        self.dirichlet_values = np.zeros(self.num_dofs)
        if dirichlet is not None:
            diri = np.asarray(dirichlet, dtype=float)
            if diri.shape != (self.num_dofs,):
                raise ValueError("dirichlet array must cover every unknown")
            self.dirichlet_values[fixed] = diri[fixed]

    # -- state handling -----------------------------------------------------

    def initial_state(self) -> np.ndarray:
        """Zero on free unknowns, Dirichlet data on constrained ones."""
        u = np.zeros(self.num_dofs)
        u[self.fixed_mask] = self.dirichlet_values[self.fixed_mask]
        return u

    def impose_dirichlet(self, u: np.ndarray) -> np.ndarray:
        out = np.asarray(u, dtype=float).copy()
        out[self.fixed_mask] = self.dirichlet_values[self.fixed_mask]
        return out

    def function(self, u: np.ndarray):
        cls = CrFunction if self.space == "cr" else P1Function
        return cls(self.mesh, u)

    def broken_gradient(self, u: np.ndarray) -> np.ndarray:
        """(nt, 2) elementwise gradient of the function with values ``u``."""
        return np.einsum("tj,tjd->td", u[self.dof_map], self.basis_grads)

    # -- energy and derivatives --------------------------------------------

    def energy(self, u: np.ndarray) -> float:
        grads = self.broken_gradient(u)
        means = u[self.dof_map].mean(axis=1)
        return float(self.mesh.areas @ (self.density.phi(grads)
                                        - self.load.values * means))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Full gradient vector (entries at constrained unknowns included)."""
        grads = self.broken_gradient(u)
        stress = self.density.dphi(grads)
        cell = self.mesh.areas[:, None] * (
            np.einsum("td,tjd->tj", stress, self.basis_grads)
            - self.load.values[:, None] / 3.0)
        out = np.zeros(self.num_dofs)
        np.add.at(out, self.dof_map.ravel(), cell.ravel())
        return out

    def hessian(self, u: np.ndarray) -> sp.csr_matrix:
        """Hessian restricted to the free unknowns (CSR)."""
        grads = self.broken_gradient(u)
        d2 = self.density.d2phi(grads)  # (nt, 2, 2)
        local = self.mesh.areas[:, None, None] * np.einsum(
            "tid,tde,tje->tij", self.basis_grads, d2, self.basis_grads)
        return self._assemble_free(local)

    def weighted_stiffness(self, weights: np.ndarray) -> sp.csr_matrix:
        """Stiffness matrix with elementwise weights, on the free unknowns."""
        local = (self.mesh.areas * weights)[:, None, None] * np.einsum(
            "tid,tjd->tij", self.basis_grads, self.basis_grads)
        return self._assemble_free(local)

    def _assemble_free(self, local: np.ndarray) -> sp.csr_matrix:
        rows = np.repeat(self.dof_map, 3, axis=1).ravel()
        cols = np.tile(self.dof_map, (1, 3)).ravel()
        A = sp.coo_matrix((local.ravel(), (rows, cols)),
                          shape=(self.num_dofs, self.num_dofs)).tocsr()
        free = np.flatnonzero(self.free_mask)
        return A[free][:, free].tocsr()

    def lumped_mass(self) -> np.ndarray:
        """Diagonal (lumped) mass: |T|/3 from each incident element."""
        out = np.zeros(self.num_dofs)
        np.add.at(out, self.dof_map.ravel(),
                  np.repeat(self.mesh.areas / 3.0, 3))
        return out

    def residual_norm(self, u: np.ndarray) -> float:
        return float(np.linalg.norm(self.gradient(u)[self.free_mask]))

    def increment_seminorm(self, delta: np.ndarray) -> float:
        """Broken H1 seminorm of an update given as a full dof vector."""
        g = self.broken_gradient(delta)
        return float(np.sqrt(self.mesh.areas @ np.einsum("td,td->t", g, g)))


@dataclass
class SolverReport:
    """Outcome of a nonlinear solve."""

    method: str
    converged: bool
    iterations: int
    energy: float
    residual_norms: list[float] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    stop_reason: str = ""


def newton_solve(problem: DiscreteProblem, u0=None, tol_abs: float = 1e-8,
                 tol_rel: float = 1e-10, max_iter: int = 60) -> tuple[np.ndarray, SolverReport]:
    """Damped Newton iteration with Armijo backtracking on the energy.

    Stops once the free-residual norm drops below ``tol_abs`` or below
    ``tol_rel`` times its initial value.  Returns the final state and a
    report; a start at the exact solution reports zero iterations.  If the
    iteration limit is reached, the iterate with the smallest residual seen
    so far is returned (with ``converged=False``).
    """
    u = problem.initial_state() if u0 is None else problem.impose_dirichlet(u0)
    free = problem.free_mask
    res0 = problem.residual_norm(u)
    norms = [res0]
    energies = [problem.energy(u)]
    threshold = max(tol_abs, tol_rel * res0)
    iterations = 0
    best_u, best_norm = u, res0
    reason = "residual below tolerance"
    while norms[-1] > threshold:
        if iterations >= max_iter:
            reason = "iteration limit reached"
            u = best_u  # hand back the best iterate seen
            break
        grad = problem.gradient(u)[free]
        step = linear_solve(problem.hessian(u), -grad)
        slope = float(grad @ step)
        if slope >= 0:  # not a descent direction; fall back to steepest descent
            step = -grad
            slope = -float(grad @ grad)
        energy0 = energies[-1]
        t = 1.0
        for _ in range(40):
            trial = u.copy()
            trial[free] += t * step
            trial_energy = problem.energy(trial)
            if trial_energy <= energy0 + 1e-4 * t * slope:
                break
            t *= 0.5
        u = trial
        iterations += 1
        norms.append(problem.residual_norm(u))
        energies.append(trial_energy)
        if norms[-1] < best_norm:
            best_u, best_norm = u, norms[-1]
    final_norm = best_norm if reason == "iteration limit reached" else norms[-1]
    final_energy = problem.energy(u) if reason == "iteration limit reached" \
        else energies[-1]
    converged = final_norm <= threshold
    report = SolverReport(method="newton", converged=converged,
                          iterations=iterations, energy=final_energy,
                          residual_norms=norms, energies=energies,
                          stop_reason=reason)
    return u, report


def gradient_flow_solve(problem: DiscreteProblem, u0=None, tau: float = 1.0,
                        eps_stop: float | None = None,
                        max_iter: int = 500) -> tuple[np.ndarray, SolverReport]:
    """Semi-implicit gradient flow / damped secant-slope iteration.

    Each step solves ``(M/tau + K_n) u^{n+1} = (M/tau) u^n + b`` on the free
    unknowns, where ``M`` is the lumped mass matrix, ``K_n`` the stiffness
    matrix weighted by the secant slopes ``psi'(|grad u^n|)/|grad u^n|``, and
    ``b`` the load (with Dirichlet elimination).  Stops when the broken H1
    seminorm of the increment per unit time drops below ``eps_stop``
    (default: the squared average element diameter divided by 20).
    """
    mesh = problem.mesh
    if eps_stop is None:
        eps_stop = float(mesh.diameters.mean()) ** 2 / 20.0
    u = problem.initial_state() if u0 is None else problem.impose_dirichlet(u0)
    free = np.flatnonzero(problem.free_mask)
    mass = problem.lumped_mass()[free]
    load_vec = np.zeros(problem.num_dofs)
    np.add.at(load_vec, problem.dof_map.ravel(),
              np.repeat(mesh.areas * problem.load.values / 3.0, 3))

    energies = [problem.energy(u)]
    rate = np.inf
    steps = 0
    reason = "increment rate below tolerance"
    step_solver = _RecycledSpdSolver()
    while True:
        slopes = problem.density.slope_ratio(
            np.sqrt(np.sum(problem.broken_gradient(u) ** 2, axis=-1)))
        K = problem.weighted_stiffness(slopes)
        rhs = load_vec[free] + mass * u[free] / tau
        rhs -= _weighted_form_fixed_part(problem, slopes)
        unew = u.copy()
        unew[free] = step_solver.solve(K + sp.diags(mass / tau), rhs)
        delta = unew - u
        rate = problem.increment_seminorm(delta) / tau
        u = unew
        steps += 1
        energies.append(problem.energy(u))
        if rate <= eps_stop:
            break
        if steps >= max_iter:
            reason = "iteration limit reached"
            break
    report = SolverReport(method="flow", converged=rate <= eps_stop,
                          iterations=steps, energy=energies[-1],
                          energies=energies,
                          residual_norms=[problem.residual_norm(u)],
                          stop_reason=reason)
    return u, report


def _weighted_form_fixed_part(problem: DiscreteProblem,
                              weights: np.ndarray) -> np.ndarray:
    """Free-row entries of the weighted stiffness applied to the fixed values."""
    fixed_vals = np.where(problem.fixed_mask, problem.dirichlet_values, 0.0)
    grads = np.einsum("tj,tjd->td", fixed_vals[problem.dof_map],
                      problem.basis_grads)
    cell = (problem.mesh.areas * weights)[:, None] * np.einsum(
        "td,tjd->tj", grads, problem.basis_grads)
    out = np.zeros(problem.num_dofs)
    np.add.at(out, problem.dof_map.ravel(), cell.ravel())
    return out[problem.free_mask]


def solve_problem(problem: DiscreteProblem, solver: str = "newton", **kwargs):
    """Dispatch to :func:`newton_solve` or :func:`gradient_flow_solve`."""
    if solver == "newton":
        return newton_solve(problem, **kwargs)
    if solver == "flow":
        return gradient_flow_solve(problem, **kwargs)
    raise ValueError(f"unknown solver {solver!r}")
