"""Adaptive solve-estimate-mark-refine loop with Doerfler marking.

Each iteration computes a nonconforming minimizer, its explicit flux
reconstruction, and a conforming candidate; evaluates the guaranteed gap
indicators; records a trace row; and refines a minimal marked set (or all
elements when running the uniform baseline).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .estimators import (EstimatorBreakdown, dual_energy, eta_hat_sq,
                         eta_res_sq, primal_energy, rho_F_sq)
from .fespaces import (CrFunction, P1Function, PwConstant, node_average,
                       project_pw, prolong_cr)
from .mesh import Triangulation, refine
from .reconstruction import MariniField, marini_reconstruct
from .solvers import DiscreteProblem, SolverReport, solve_problem

__all__ = [
    "AfemConfig", "AfemProblem", "AfemRecord", "AfemTrace", "LevelState",
    "afem_run", "conforming_candidate", "dorfler_mark", "read_trace_csv",
]

_CONFORMING_MODES = ("minimize", "average")
_SOLVERS = ("newton", "flow")
_MARKERS = ("pd", "residual")

#: Trace CSV column names, in file order.
CSV_COLUMNS = ("k", "N", "elements", "eta_hat_sq", "eta_sq", "eta_res_sq",
               "rho_sq", "I_primal", "D_dual", "discrete_gap", "seconds")


@dataclass(frozen=True)
class AfemConfig:
    """Parameters of one adaptive run.

    ``theta`` is the bulk-marking parameter in (0,1); ``eps_stop`` stops the
    loop once the guaranteed squared estimator total drops to or below it
    (default 0: run all iterations).  ``conforming`` selects how the
    conforming candidate is built ("minimize": solve the conforming
    minimization problem; "average": vertex-average the nonconforming
    minimizer).  ``solver``/``solver_options`` configure the nonlinear solver
    used at every level; ``mark_with`` chooses the marking indicators
    ("pd": guaranteed gap indicators, "residual": residual indicators);
    ``uniform`` replaces marking by all elements; ``interior_node`` also
    splits marked elements at their barycenter during refinement.
    """

    theta: float = 0.5
    eps_stop: float = 0.0
    max_iterations: int = 20
    conforming: str = "minimize"
    solver: str = "newton"
    solver_options: dict = field(default_factory=dict)
    mark_with: str = "pd"
    uniform: bool = False
    interior_node: bool = False

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.eps_stop < 0.0:
            raise ValueError("eps_stop must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.conforming not in _CONFORMING_MODES:
            raise ValueError(f"conforming must be one of {_CONFORMING_MODES}")
        if self.solver not in _SOLVERS:
            raise ValueError(f"solver must be one of {_SOLVERS}")
        if self.mark_with not in _MARKERS:
            raise ValueError(f"mark_with must be one of {_MARKERS}")


@dataclass(frozen=True)
class AfemProblem:
    """Problem description consumed by :func:`afem_run`.

    ``load`` is either a constant or a callable on point arrays; it is
    projected to its elementwise integral means on every mesh.  ``dirichlet``
    (callable or ``None`` for homogeneous data) supplies boundary values,
    evaluated at side midpoints for the nonconforming space and at vertices
    for the conforming one.  ``exact_gradient`` enables the distance-to-exact
    error column; ``reference_energy`` instead reports the conforming energy
    minus this reference (for problems whose minimizer is not accessible
    pointwise).  ``residual_p`` overrides the growth exponent used by the
    residual indicators (default: the density exponent, or 2).
    """

    mesh: Triangulation
    density: Any
    load: Any
    dirichlet: Callable | None = None
    exact_gradient: Callable | None = None
    reference_energy: float | None = None
    label: str = ""
    residual_p: float | None = None

    def load_means(self, mesh: Triangulation) -> PwConstant:
        if callable(self.load):
            return project_pw(mesh, self.load)
        return PwConstant(mesh, np.full(mesh.num_triangles, float(self.load)))

    def side_dirichlet(self, mesh: Triangulation) -> np.ndarray | None:
        if self.dirichlet is None:
            return None
        return np.asarray(self.dirichlet(mesh.side_midpoints), dtype=float)

    def vertex_dirichlet(self, mesh: Triangulation) -> np.ndarray:
        if self.dirichlet is None:
            return np.zeros(mesh.num_vertices)
        return np.asarray(self.dirichlet(mesh.vertices), dtype=float)

    def growth_exponent(self) -> float:
        if self.residual_p is not None:
            return float(self.residual_p)
        return float(getattr(self.density, "p", 2.0))


@dataclass(frozen=True)
class AfemRecord:
    """One trace row; field order matches :data:`CSV_COLUMNS`."""

    k: int
    N: int
    elements: int
    eta_hat_sq: float
    eta_sq: float
    eta_res_sq: float
    rho_sq: float
    I_primal: float
    D_dual: float
    discrete_gap: float
    seconds: float


@dataclass
class LevelState:
    """Discrete fields of the last completed iteration (for dumps/tests)."""

    mesh: Triangulation
    f_h: PwConstant
    u_cr: CrFunction
    flux: MariniField
    candidate: P1Function
    indicators: EstimatorBreakdown
    residual: EstimatorBreakdown


@dataclass
class AfemTrace:
    """Recorded adaptive run: per-iteration rows plus metadata.

    ``cr_energies`` holds the nonconforming minimal energies (one per
    recorded iteration; not a CSV column).  ``failed``/``failure_reason``
    flag a solver breakdown, in which case the rows cover only the completed
    iterations.  ``final`` keeps the discrete fields of the last completed
    iteration.
    """

    config: AfemConfig
    problem: str = ""
    seed: int | None = None
    records: list[AfemRecord] = field(default_factory=list)
    cr_energies: list[float] = field(default_factory=list)
    failed: bool = False
    failure_reason: str = ""
    final: LevelState | None = None

    def column(self, name: str) -> np.ndarray:
        """Values of one trace column over all rows, as an array."""
        if name not in CSV_COLUMNS:
            raise KeyError(f"unknown trace column {name!r}")
        dtype = int if name in ("k", "N", "elements") else float
        return np.array([getattr(r, name) for r in self.records], dtype=dtype)

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.records:
            cells = [str(r.k), str(r.N), str(r.elements)]
            cells += [format(getattr(r, name), ".17g")
                      for name in CSV_COLUMNS[3:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(self.csv_text())


def read_trace_csv(path) -> list[AfemRecord]:
    """Read trace rows back; floats round-trip exactly (17 significant
    digits)."""
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("trace file header does not match the trace schema")
    out = []
    for row in rows[1:]:
        if len(row) != len(CSV_COLUMNS):
            raise ValueError("malformed trace row")
        out.append(AfemRecord(int(row[0]), int(row[1]), int(row[2]),
                              *(float(cell) for cell in row[3:])))
    return out


def dorfler_mark(indicators, theta: float) -> np.ndarray:
    """Minimal-cardinality bulk marking.

    Returns the smallest set ``M`` of element ids (ascending) whose
    indicator sum reaches ``theta**2`` times the total, realized by a
    descending sort with ties broken toward smaller ids and a greedy prefix.
    All-zero indicators give an empty set.
    """
    vals = np.asarray(indicators, dtype=float)
    if vals.ndim != 1:
        raise ValueError("indicators must be a flat per-element array")
    if vals.size and float(vals.min()) < 0.0:
        raise ValueError("indicators must be nonnegative")
    total = float(vals.sum())
    if total <= 0.0:
        return np.empty(0, dtype=int)
    order = np.lexsort((np.arange(vals.size), -vals))
    csum = np.cumsum(vals[order])
    target = theta ** 2 * total
    first = int(np.searchsorted(csum, target, side="left"))
    count = min(first + 1, int(np.count_nonzero(vals)))
    return np.sort(order[:count])


def conforming_candidate(u: CrFunction, density, f_h: PwConstant,
                         mode: str = "minimize",
                         vertex_dirichlet: np.ndarray | None = None,
                         solver: str = "newton", solver_options=None,
                         ) -> tuple[P1Function, SolverReport | None]:
    """Conforming approximation from a nonconforming minimizer.

    ``"average"`` vertex-averages ``u`` and overrides Dirichlet vertices
    with the supplied boundary values (zero if omitted), so the result
    always satisfies the boundary condition.  ``"minimize"`` solves the
    conforming minimization problem (same density and load), started from
    the vertex average, and returns its solver report alongside.
    """
    mesh = u.mesh
    gv = (np.zeros(mesh.num_vertices) if vertex_dirichlet is None
          else np.asarray(vertex_dirichlet, dtype=float))
    averaged = node_average(u, dirichlet_values=gv)
    if mode == "average":
        return averaged, None
    if mode == "minimize":
        problem = DiscreteProblem(mesh, density, f_h, space="p1",
                                  dirichlet=gv)
        state, report = solve_problem(problem, solver=solver,
                                      u0=averaged.values,
                                      **(solver_options or {}))
        return P1Function(mesh, state), report
    raise ValueError(f"unknown conforming mode {mode!r}")


def _trace_side_means(v: P1Function) -> np.ndarray:
    """Side means of a conforming function (exact: endpoint average)."""
    mesh = v.mesh
    return 0.5 * (v.values[mesh.sides[:, 0]] + v.values[mesh.sides[:, 1]])


def _rho_sq(problem: AfemProblem, candidate: P1Function,
            primal: float) -> float:
    if problem.exact_gradient is not None:
        return rho_F_sq(candidate, problem.exact_gradient,
                        problem.growth_exponent())
    if problem.reference_energy is not None:
        return primal - problem.reference_energy
    return float("nan")


def afem_run(problem: AfemProblem, cfg: AfemConfig,
             seed: int | None = None) -> AfemTrace:
    """Run the adaptive loop and record one trace row per iteration.

    Per iteration: minimize over the nonconforming space (warm-started from
    the previous level by midpoint evaluation), reconstruct the dual flux,
    build the conforming candidate, evaluate the guaranteed indicators and
    energies, and record.  The loop then stops if the squared estimator
    total is at most ``cfg.eps_stop``, else marks (Doerfler on the
    configured indicators, or every element with ``cfg.uniform``) and
    refines.  A solver failure at any level stops the run with the rows
    recorded so far and ``failed`` set.  The ``seconds`` column measures the
    solve-to-estimate span of each iteration and is the only
    run-to-run-dependent column.
    """
    trace = AfemTrace(config=cfg, problem=problem.label, seed=seed)
    mesh = problem.mesh
    previous: CrFunction | None = None

    for k in range(cfg.max_iterations):
        started = time.perf_counter()
        f_h = problem.load_means(mesh)
        cr_problem = DiscreteProblem(mesh, problem.density, f_h, space="cr",
                                     dirichlet=problem.side_dirichlet(mesh))
        warm = (None if previous is None
                else prolong_cr(previous, mesh).values)
        state, report = solve_problem(cr_problem, solver=cfg.solver,
                                      u0=warm, **cfg.solver_options)
        if not report.converged:
            trace.failed = True
            trace.failure_reason = (
                f"{cfg.solver} solver did not converge at iteration {k} "
                f"({report.stop_reason}, residual {report.residual_norms[-1]:.3e})")
            break
        u_cr = CrFunction(mesh, state)
        flux = marini_reconstruct(u_cr, problem.density, f_h)
        candidate, conf_report = conforming_candidate(
            u_cr, problem.density, f_h, mode=cfg.conforming,
            vertex_dirichlet=problem.vertex_dirichlet(mesh),
            solver=cfg.solver, solver_options=cfg.solver_options)
        if conf_report is not None and not conf_report.converged:
            trace.failed = True
            trace.failure_reason = (
                f"conforming {cfg.solver} solver did not converge at "
                f"iteration {k} ({conf_report.stop_reason})")
            break

        indicators = eta_hat_sq(candidate, flux, problem.density, f_h)
        residual = eta_res_sq(candidate, f_h, problem.growth_exponent())
        primal = primal_energy(candidate, problem.density, f_h)
        dual = dual_energy(flux, problem.density, f_h,
                           boundary_values=_trace_side_means(candidate))
        seconds = time.perf_counter() - started

        trace.records.append(AfemRecord(
            k=k, N=mesh.num_vertices, elements=mesh.num_triangles,
            eta_hat_sq=indicators.eta_hat_sq_total,
            eta_sq=indicators.eta_sq_total,
            eta_res_sq=residual.eta_res_sq_total,
            rho_sq=_rho_sq(problem, candidate, primal),
            I_primal=primal, D_dual=dual, discrete_gap=primal - dual,
            seconds=seconds))
        trace.cr_energies.append(report.energy)
        trace.final = LevelState(mesh=mesh, f_h=f_h, u_cr=u_cr, flux=flux,
                                 candidate=candidate, indicators=indicators,
                                 residual=residual)

        if indicators.eta_hat_sq_total <= cfg.eps_stop:
            break
        if k == cfg.max_iterations - 1:
            break

        if cfg.uniform:
            marked = np.arange(mesh.num_triangles)
        else:
            mark_values = (indicators.eta_hat_sq if cfg.mark_with == "pd"
                           else residual.eta_res_sq)
            marked = dorfler_mark(mark_values, cfg.theta)
            if marked.size == 0:
                break
            # minimality: dropping the smallest marked indicator must break
            # the bulk inequality (holds by construction of the greedy prefix)
            total = float(np.sum(mark_values))
            in_set = float(np.sum(mark_values[marked]))
            assert in_set >= cfg.theta ** 2 * total
            assert (in_set - float(np.min(mark_values[marked]))
                    < cfg.theta ** 2 * total) or marked.size == 1

        refined = refine(mesh, marked, interior_node=cfg.interior_node)
        assert refined.num_vertices > mesh.num_vertices
        previous = u_cr
        mesh = refined

    return trace
