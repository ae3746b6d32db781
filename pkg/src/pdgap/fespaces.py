"""Lowest-order finite element functions on a triangulation.

Three discrete spaces are provided:

* :class:`P1Function` -- continuous piecewise affine, one value per vertex;
* :class:`CrFunction` -- nonconforming piecewise affine with continuity at
  side midpoints (Crouzeix-Raviart), one value per side midpoint;
* :class:`Rt0Field` -- lowest-order Raviart-Thomas vector fields, one normal
  flux per side (along the mesh's canonical side normal), with continuous
  normal component and elementwise form ``z(x) = a_T + b_T (x - x_T)``.

Piecewise constants live in :class:`PwConstant` / :class:`PwConstantVector`.
All evaluation helpers work on stacked per-triangle point arrays of shape
``(nt, nq, 2)`` as produced by :meth:`pdgap.quadrature.TriangleRule.points`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Triangulation
from .quadrature import RULE_ORDER4, TriangleRule

__all__ = [
    "PwConstant", "PwConstantVector", "P1Function", "CrFunction", "Rt0Field",
    "project_pw", "grad_h", "div", "node_average", "vertex_interpolate",
    "side_jump", "normal_jump", "vector_jump", "ibp_residual", "side_means",
    "prolong_p1", "prolong_cr", "write_function_csv",
]


@dataclass
class PwConstant:
    """Piecewise constant scalar: one value per triangle."""

    mesh: Triangulation
    values: np.ndarray

    def integral(self) -> float:
        return float(self.mesh.areas @ self.values)


@dataclass
class PwConstantVector:
    """Piecewise constant 2D vector field: shape (nt, 2)."""

    mesh: Triangulation
    values: np.ndarray


class P1Function:
    """Continuous piecewise affine function given by vertex values (nv,)."""

    def __init__(self, mesh: Triangulation, values):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (mesh.num_vertices,):
            raise ValueError("P1 values must have one entry per vertex")

    def gradients(self) -> np.ndarray:
        """(nt, 2) broken (here: elementwise) gradient."""
        vv = self.values[self.mesh.triangles]
        return np.einsum("ti,tid->td", vv, self.mesh.barycentric_gradients)

    def triangle_vertex_values(self) -> np.ndarray:
        """(nt, 3) values at the triangle corners."""
        return self.values[self.mesh.triangles]

    def element_means(self) -> np.ndarray:
        """(nt,) integral means (= barycenter values)."""
        return self.values[self.mesh.triangles].mean(axis=1)

    def at_points(self, points: np.ndarray) -> np.ndarray:
        return _broken_affine_at(self.mesh, self.element_means(),
                                 self.gradients(), points)


class CrFunction:
    """Crouzeix-Raviart function given by side midpoint values (ns,)."""

    def __init__(self, mesh: Triangulation, values):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (mesh.num_sides,):
            raise ValueError("CR values must have one entry per side")

    def gradients(self) -> np.ndarray:
        """(nt, 2) broken gradient.

        The basis function of local side j = (v_j, v_{j+1}) is
        ``1 - 2 lambda_{j+2}``, so its gradient is ``-2 grad lambda_{j+2}``.
        """
        vv = self.values[self.mesh.tri_sides]
        opp = self.mesh.barycentric_gradients[:, [2, 0, 1], :]
        return np.einsum("tj,tjd->td", vv, -2.0 * opp)

    def triangle_vertex_values(self) -> np.ndarray:
        """(nt, 3) corner values of the broken affine representative.

        At local vertex i the affine function through the three side midpoint
        values equals (sum of the side values) minus twice the value on the
        side opposite vertex i, which is local side i+1.
        """
        vv = self.values[self.mesh.tri_sides]
        return vv.sum(axis=1, keepdims=True) - 2.0 * vv[:, [1, 2, 0]]

    def element_means(self) -> np.ndarray:
        """(nt,) integral means (= mean of the three midpoint values)."""
        return self.values[self.mesh.tri_sides].mean(axis=1)

    def at_points(self, points: np.ndarray) -> np.ndarray:
        return _broken_affine_at(self.mesh, self.element_means(),
                                 self.gradients(), points)


class Rt0Field:
    """Lowest-order Raviart-Thomas field given by side normal fluxes (ns,).

    ``coeffs[s]`` is the (constant) normal component of the field along side
    ``s`` with respect to the mesh's canonical side normal, so the normal
    component is continuous across sides by construction.
    """

    def __init__(self, mesh: Triangulation, coeffs):
        self.mesh = mesh
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (mesh.num_sides,):
            raise ValueError("field coefficients must have one entry per side")

    def element_linear(self) -> tuple[np.ndarray, np.ndarray]:
        """Elementwise form ``z(x) = a_T + b_T (x - x_T)``: (nt, 2) and (nt,)."""
        mesh = self.mesh
        c = self.coeffs[mesh.tri_sides] * mesh.tri_side_orient \
            * mesh.side_lengths[mesh.tri_sides]
        # local basis: sigma_j |s_j| / (2|T|) (x - P_{j+2})
        opp = mesh.triangle_coords[:, [2, 0, 1], :]
        scale = 1.0 / (2.0 * mesh.areas)
        b = c.sum(axis=1) * scale
        a = scale[:, None] * np.einsum(
            "tj,tjd->td", c, mesh.barycenters[:, None, :] - opp)
        return a, b

    def element_means(self) -> np.ndarray:
        """(nt, 2) integral means (= barycenter values)."""
        return self.element_linear()[0]

    def divergence(self) -> PwConstant:
        """Elementwise (global, since normal components match) divergence."""
        return PwConstant(self.mesh, 2.0 * self.element_linear()[1])

    def at_points(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at stacked per-triangle points (nt, nq, 2) -> (nt, nq, 2)."""
        a, b = self.element_linear()
        rel = points - self.mesh.barycenters[:, None, :]
        return a[:, None, :] + b[:, None, None] * rel

    def at_triangle_vertices(self) -> np.ndarray:
        """(nt, 3, 2) values at the triangle corners."""
        return self.at_points(self.mesh.triangle_coords)


def _broken_affine_at(mesh, means, grads, points):
    rel = points - mesh.barycenters[:, None, :]
    return means[:, None] + np.einsum("td,tqd->tq", grads, rel)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def project_pw(mesh: Triangulation, f, rule: TriangleRule = RULE_ORDER4) -> PwConstant:
    """Elementwise integral means of ``f`` (callable on (..., 2) points or a
    per-triangle value array)."""
    f_arr = f if not callable(f) else None
    if f_arr is not None:
        vals = np.asarray(f_arr, dtype=float)
        if vals.shape != (mesh.num_triangles,):
            raise ValueError("per-triangle values must have shape (nt,)")
        return PwConstant(mesh, vals.copy())
    pts = rule.points(mesh.triangle_coords)
    return PwConstant(mesh, np.asarray(f(pts), dtype=float) @ rule.weights)


def write_function_csv(fn, path) -> None:
    """Serialize a finite element function to ``dof_id,value`` CSV rows.

    Works for any object with a flat ``values`` or ``coeffs`` array (vertex,
    side-midpoint, or normal-flux unknowns); values carry 17 significant
    digits so they round-trip exactly.
    """
    values = getattr(fn, "values", None)
    if values is None:
        values = getattr(fn, "coeffs", None)
    if values is None:
        raise TypeError("object has no 'values' or 'coeffs' array")
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("dof_id,value\n")
        for i, v in enumerate(np.asarray(values, dtype=float)):
            fh.write(f"{i},{v:.17g}\n")


def grad_h(v: P1Function | CrFunction) -> PwConstantVector:
    """Broken gradient as a piecewise constant vector field."""
    return PwConstantVector(v.mesh, v.gradients())


def div(z: Rt0Field) -> PwConstant:
    """Divergence of a lowest-order Raviart-Thomas field."""
    return z.divergence()


def node_average(v: CrFunction, dirichlet_values=None) -> P1Function:
    """Conforming approximation by arithmetic vertex averaging.

    Each vertex value is the mean of the broken corner values over the
    incident triangles.  If ``dirichlet_values`` is given (array over all
    vertices, or callable on coordinates), vertices on the Dirichlet boundary
    are overridden with those values.
    """
    mesh = v.mesh
    corner = v.triangle_vertex_values()
    sums = np.zeros(mesh.num_vertices)
    np.add.at(sums, mesh.triangles.ravel(), corner.ravel())
    counts = np.bincount(mesh.triangles.ravel(), minlength=mesh.num_vertices)
    averaged = sums / counts
    if dirichlet_values is not None:
        gv = (np.asarray(dirichlet_values(mesh.vertices), dtype=float)
              if callable(dirichlet_values)
              else np.asarray(dirichlet_values, dtype=float))
        mask = mesh.dirichlet_vertex_mask
        averaged[mask] = gv[mask]
    return P1Function(mesh, averaged)


def vertex_interpolate(mesh: Triangulation, corner_values: np.ndarray) -> np.ndarray:
    """Integrals of the elementwise affine interpolant of corner values.

    Given values at the triangle corners (nt, 3), returns the per-triangle
    integral of the affine function matching them: ``|T|/3 * sum``.  For a
    convex integrand sampled at the corners this never underestimates the
    exact integral.
    """
    corner_values = np.asarray(corner_values, dtype=float)
    return mesh.areas / 3.0 * corner_values.sum(axis=1)


def side_jump(v: P1Function | CrFunction) -> np.ndarray:
    """Jumps of the broken trace at both side endpoints: (ns, 2).

    Row ``s`` holds the jump (trace from the first incident triangle minus
    trace from the second) at the side's two vertices in sorted order.  On
    boundary sides the jump is the trace itself.
    """
    mesh = v.mesh
    corner = v.triangle_vertex_values()
    out = np.zeros((mesh.num_sides, 2))
    for col in range(2):
        vids = mesh.sides[:, col]
        for sgn, tcol in ((1.0, 0), (-1.0, 1)):
            tris = mesh.side_tris[:, tcol]
            valid = tris >= 0
            loc = np.argmax(
                mesh.triangles[tris[valid]] == vids[valid, None], axis=1)
            out[valid, col] += sgn * corner[tris[valid], loc]
    return out


def normal_jump(q: PwConstantVector) -> np.ndarray:
    """Jump of the normal component across each side: (ns,).

    Computed along the canonical side normal; on boundary sides this is the
    trace ``q . n`` of the single incident triangle.
    """
    return np.einsum("sd,sd->s", vector_jump(q), q.mesh.side_normals)


def vector_jump(q: PwConstantVector) -> np.ndarray:
    """Full vector jump across each side: (ns, 2), trace on boundary sides."""
    mesh = q.mesh
    minus = q.values[mesh.side_tris[:, 0]]
    plus = np.where((mesh.side_tris[:, 1] >= 0)[:, None],
                    q.values[mesh.side_tris[:, 1]], 0.0)
    return minus - plus


def ibp_residual(z: Rt0Field, v: P1Function | CrFunction) -> float:
    """Integration-by-parts defect, exactly zero for affine data.

    Returns ``int (div z) v + int z . grad_h v - sum_S int_S (z . n) [v]``
    where the side sum runs over all sides with the jump convention of
    :func:`side_jump`.  All integrands are (piecewise) polynomials integrated
    exactly (barycenter and midpoint rules).
    """
    mesh = z.mesh
    a, b = z.element_linear()
    divergence = 2.0 * b
    bulk = float(mesh.areas @ (divergence * v.element_means()))
    bulk += float(mesh.areas @ np.einsum("td,td->t", a, v.gradients()))
    jumps = side_jump(v).mean(axis=1)  # side means of affine jumps
    sides = float(np.sum(z.coeffs * jumps * mesh.side_lengths))
    return bulk - sides


def side_means(mesh: Triangulation, g, sides=None) -> np.ndarray:
    """Integral means of a callable over (a subset of) sides via 2-point Gauss."""
    ids = np.arange(mesh.num_sides) if sides is None else np.asarray(sides)
    a = mesh.vertices[mesh.sides[ids, 0]]
    b = mesh.vertices[mesh.sides[ids, 1]]
    t = 0.5 / np.sqrt(3.0)
    p1 = 0.5 * (a + b) - t * (b - a)
    p2 = 0.5 * (a + b) + t * (b - a)
    return 0.5 * (np.asarray(g(p1), dtype=float) + np.asarray(g(p2), dtype=float))


# ---------------------------------------------------------------------------
# Prolongation to a refined mesh (for warm starts)
# ---------------------------------------------------------------------------

def _eval_parent_affine(old, means, grads, coarse_of, points):
    rel = points - old.barycenters[coarse_of]
    return means[coarse_of] + np.einsum("nd,nd->n", grads[coarse_of], rel)


def prolong_p1(v: P1Function, fine: Triangulation) -> P1Function:
    """Transfer a P1 function to a refinement of its mesh (exactly)."""
    if fine.parent_elements is None:
        raise ValueError("fine mesh does not track parent elements")
    indptr, data = fine.vertex_to_triangles
    owner_tri = data[indptr[:-1]]  # one incident fine triangle per vertex
    coarse_of = fine.parent_elements[owner_tri]
    vals = _eval_parent_affine(v.mesh, v.element_means(), v.gradients(),
                               coarse_of, fine.vertices)
    return P1Function(fine, vals)


def prolong_cr(v: CrFunction, fine: Triangulation) -> CrFunction:
    """Transfer a CR function to a refinement by evaluating the broken affine
    representative of the parent element at the new side midpoints."""
    if fine.parent_elements is None:
        raise ValueError("fine mesh does not track parent elements")
    owner_tri = fine.side_tris[:, 0]
    coarse_of = fine.parent_elements[owner_tri]
    vals = _eval_parent_affine(v.mesh, v.element_means(), v.gradients(),
                               coarse_of, fine.side_midpoints)
    return CrFunction(fine, vals)
