"""Tests for the gap, residual, and oscillation estimators."""

import numpy as np
import pytest

from pdgap.energy_models import OptimalDesignDensity, PPowerDensity
from pdgap.estimators import (aitken_extrapolate, dual_energy, eta_hat_sq,
                              eta_res_sq, eta_sq, oscillation, primal_energy,
                              refined_gap_bounds, rho_F_sq)
from pdgap.fespaces import (CrFunction, P1Function, PwConstant, Rt0Field,
                            node_average)
from pdgap.mesh import (Triangulation, make_lshape_mesh, make_square_mesh,
                        uniform_refine)
from pdgap.quadrature import RULE_ORDER8
from pdgap.reconstruction import marini_reconstruct
from pdgap.solvers import DiscreteProblem, newton_solve

REF = Triangulation(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                    np.array([[0, 1, 2]]))
P2 = PPowerDensity(2.0)


def _identity_field(mesh):
    """The field z(x) = x as a glued lowest-order Raviart-Thomas field."""
    coeffs = np.einsum("sd,sd->s", mesh.side_midpoints, mesh.side_normals)
    return Rt0Field(mesh, coeffs)


def _constant_field(mesh, c):
    return Rt0Field(mesh, np.asarray(c) @ mesh.side_normals.T)


def _converged_pair(p=1.6, level=0):
    # the strongly degenerate exponent needs one refinement before Newton
    # can push the residual to tight tolerances
    tol = 1e-11
    if p == 1.2:
        level, tol = max(level, 1), 1e-9
    mesh = uniform_refine(make_lshape_mesh(), level) if level \
        else make_lshape_mesh()
    f_h = PwConstant(mesh, np.ones(mesh.num_triangles))
    density = PPowerDensity(p)
    prob = DiscreteProblem(mesh, density, f_h, space="cr")
    u0 = None
    if p != 2.0:
        u0, _ = newton_solve(
            DiscreteProblem(mesh, P2, f_h, space="cr"), tol_abs=1e-12)
    state, rep = newton_solve(prob, u0=u0, tol_abs=tol, tol_rel=0.0)
    assert rep.converged
    u_cr = prob.function(state)
    z = marini_reconstruct(u_cr, density, f_h)
    u_tilde = node_average(u_cr, dirichlet_values=np.zeros(mesh.num_vertices))
    return mesh, f_h, density, u_cr, z, u_tilde


# ---------------------------------------------------------------------------
# conjugate quadrature deficits: closed forms on the reference triangle
# ---------------------------------------------------------------------------

def test_reference_triangle_closed_forms():
    # z(x,y) = (x,y), p=2: vertex-rule deficit 1/6 - 1/18 = 1/9 and exact
    # deficit 1/12 - 1/18 = 1/36
    z = _identity_field(REF)
    f_h = PwConstant(REF, np.array([-2.0]))   # div z = 2
    u0 = P1Function(REF, np.zeros(3))
    bd = eta_sq(u0, z, P2, f_h)
    assert bd.eta_D_hat_sq[0] == pytest.approx(1.0 / 9.0, abs=1e-15)
    assert bd.eta_D_sq[0] == pytest.approx(1.0 / 36.0, abs=1e-15)
    assert bd.eta_D_hat_sq[0] >= bd.eta_D_sq[0] >= 0.0


def test_constant_field_has_zero_deficit():
    z = _constant_field(REF, [0.3, -0.2])
    f_h = PwConstant(REF, np.zeros(1))
    u0 = P1Function(REF, np.zeros(3))
    bd = eta_sq(u0, z, P2, f_h)
    assert bd.eta_D_hat_sq[0] == 0.0
    assert bd.eta_D_sq[0] == pytest.approx(0.0, abs=1e-15)


def test_gradient_pair_gives_zero_eta():
    # f = 0 and affine boundary data: the minimizer is the affine function,
    # its stress is constant and representable; eta vanishes identically
    mesh = make_lshape_mesh()
    f_h = PwConstant(mesh, np.zeros(mesh.num_triangles))
    density = PPowerDensity(1.6)
    grad = np.array([0.4, -0.3])
    u_tilde = P1Function(mesh, mesh.vertices @ grad)
    z = _constant_field(mesh, density.dphi(grad[None])[0])
    bd = eta_sq(u_tilde, z, density, f_h)
    assert bd.eta_sq_total == pytest.approx(0.0, abs=1e-14)
    assert bd.eta_hat_sq_total == pytest.approx(0.0, abs=1e-14)


def test_breakdown_invariants_random_pairs():
    rng = np.random.default_rng(21)
    mesh = uniform_refine(make_lshape_mesh(), 1)
    f_h = PwConstant(mesh, np.ones(mesh.num_triangles))
    for density in (PPowerDensity(1.6), OptimalDesignDensity()):
        for _ in range(5):
            u_cr = CrFunction(mesh, rng.normal(size=mesh.num_sides))
            z = marini_reconstruct(u_cr, density, f_h)  # feasible by design
            u_tilde = P1Function(mesh, rng.normal(size=mesh.num_vertices))
            bd = eta_sq(u_tilde, z, density, f_h)
            scale = max(bd.eta_hat_sq_total, 1.0)
            assert np.all(bd.eta_A_sq >= 0.0)
            assert np.all(bd.eta_sq >= 0.0)
            assert np.all(bd.eta_hat_sq - bd.eta_sq >= -1e-12 * scale)
            assert np.allclose(
                bd.eta_sq, bd.eta_A_sq + bd.eta_B_sq + bd.eta_C_sq
                + bd.eta_D_sq, atol=0.0)
            assert np.allclose(
                bd.eta_hat_sq, bd.eta_A_sq + bd.eta_B_sq + bd.eta_C_hat_sq
                + bd.eta_D_hat_sq, atol=0.0)


def test_infeasible_dual_field_marks_infinity():
    mesh, f_h, density, u_cr, z, u_tilde = _converged_pair()
    bad = Rt0Field(mesh, 1.1 * z.coeffs)
    bd = eta_sq(u_tilde, bad, density, f_h)
    assert np.all(np.isinf(bd.eta_sq))
    assert np.isinf(bd.eta_hat_sq_total)
    assert dual_energy(bad, density, f_h) == -np.inf


def test_eta_hat_alias():
    mesh, f_h, density, u_cr, z, u_tilde = _converged_pair()
    a = eta_sq(u_tilde, z, density, f_h)
    b = eta_hat_sq(u_tilde, z, density, f_h)
    assert np.array_equal(a.eta_hat_sq, b.eta_hat_sq)


# ---------------------------------------------------------------------------
# dual energy
# ---------------------------------------------------------------------------

def test_dual_energy_closed_forms():
    mesh = make_square_mesh(4)
    f_h = PwConstant(mesh, np.zeros(mesh.num_triangles))
    zero = Rt0Field(mesh, np.zeros(mesh.num_sides))
    assert dual_energy(zero, P2, f_h) == 0.0
    c = np.array([0.7, -0.4])
    z = _constant_field(mesh, c)
    expected = -1.0 * 0.5 * float(c @ c)   # |Omega| = 1
    assert dual_energy(z, P2, f_h) == pytest.approx(expected, abs=1e-14)


def test_dual_energy_vertex_rule_is_lower_bound():
    mesh, f_h, density, u_cr, z, u_tilde = _converged_pair()
    guaranteed = dual_energy(z, density, f_h)
    accurate = dual_energy(z, density, f_h, quadrature="order4")
    assert guaranteed <= accurate + 1e-15
    with pytest.raises(ValueError):
        dual_energy(z, density, f_h, quadrature="order2")


def test_weak_duality_and_gap_identity():
    # the vertex-rule dual value lower-bounds the conforming primal energy,
    # and their difference reproduces the total gap indicator
    for p in (2.0, 1.6, 1.2):
        mesh, f_h, density, u_cr, z, u_tilde = _converged_pair(p=p)
        primal = primal_energy(u_tilde, density, f_h)
        dual = dual_energy(z, density, f_h)
        scale = abs(primal) + abs(dual)
        assert primal - dual >= -1e-10 * scale
        bd = eta_sq(u_tilde, z, density, f_h)
        assert primal - dual == pytest.approx(bd.eta_hat_sq_total,
                                              abs=1e-9 * max(scale, 1.0))


# ---------------------------------------------------------------------------
# residual estimator
# ---------------------------------------------------------------------------

def test_residual_zero_for_affine_no_load():
    mesh = make_lshape_mesh()
    u_c = P1Function(mesh, mesh.vertices @ np.array([0.5, 1.5]) + 0.3)
    f_h = PwConstant(mesh, np.zeros(mesh.num_triangles))
    bd = eta_res_sq(u_c, f_h, p=1.6)
    # interpolated-gradient roundoff leaves ~1e-31 jump residue
    assert bd.eta_res_sq_total <= 1e-28
    assert np.all(bd.eta_E_sq == 0.0)


def test_residual_p2_reduction_formulas():
    rng = np.random.default_rng(31)
    mesh = make_lshape_mesh()
    u_c = P1Function(mesh, rng.normal(size=mesh.num_vertices))
    f_h = PwConstant(mesh, rng.normal(size=mesh.num_triangles))
    bd = eta_res_sq(u_c, f_h, p=2.0)
    expect_E = mesh.diameters ** 2 * f_h.values ** 2 * mesh.areas
    assert np.allclose(bd.eta_E_sq, expect_E, rtol=1e-13)
    grads = u_c.gradients()
    interior = mesh.side_tris[:, 1] >= 0
    jump = grads[mesh.side_tris[interior, 0]] \
        - grads[mesh.side_tris[interior, 1]]
    expect_J = mesh.side_lengths[interior] ** 2 * np.sum(jump ** 2, axis=-1)
    assert np.allclose(bd.eta_J_sq[interior], expect_J, rtol=1e-13)
    assert np.all(bd.eta_J_sq[~interior] == 0.0)


def test_residual_unit_jump_patch():
    # vertical unit side with gradient jump (1,0): h_S |S| |jump|^2 = 1
    mesh = Triangulation(
        np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.5], [-1.0, 0.5]]),
        np.array([[0, 2, 1], [0, 1, 3]]))
    u_c = P1Function(mesh, np.array([0.0, 0.0, 1.0, 0.0]))
    f_h = PwConstant(mesh, np.zeros(2))
    bd = eta_res_sq(u_c, f_h, p=2.0)
    interior = np.flatnonzero(mesh.side_tris[:, 1] >= 0)
    assert interior.size == 1
    assert bd.eta_J_sq[interior[0]] == pytest.approx(1.0, abs=1e-14)
    # charged in full to both adjacent elements
    assert np.allclose(bd.eta_res_sq, [1.0, 1.0], atol=1e-14)


def test_residual_element_total_charges_both_sides():
    mesh, f_h, density, u_cr, z, u_tilde = _converged_pair()
    bd = eta_res_sq(u_tilde, f_h, p=1.6)
    interior = mesh.side_tris[:, 1] >= 0
    charge = np.where(interior, bd.eta_J_sq, 0.0)
    recomputed = bd.eta_E_sq + charge[mesh.tri_sides].sum(axis=1)
    assert np.array_equal(bd.eta_res_sq, recomputed)
    assert bd.eta_res_sq_total <= np.sum(bd.eta_res_sq) + 1e-15


def test_residual_rejects_bad_exponent():
    mesh = make_lshape_mesh()
    u_c = P1Function(mesh, np.zeros(mesh.num_vertices))
    f_h = PwConstant(mesh, np.ones(mesh.num_triangles))
    with pytest.raises(ValueError):
        eta_res_sq(u_c, f_h, p=1.0)


# ---------------------------------------------------------------------------
# oscillation
# ---------------------------------------------------------------------------

def test_oscillation_zero_for_constant_load():
    mesh = make_lshape_mesh()
    u_c = P1Function(mesh, np.zeros(mesh.num_vertices))
    osc = oscillation(u_c, lambda x: np.full(x.shape[:-1], 3.0), p=1.6)
    # quadrature-weight roundoff leaves ~1e-42 residue
    assert np.all(osc <= 1e-35)


def test_oscillation_linear_load_closed_form():
    # f(x) = x_1 on the reference triangle, p=2:
    # h^2 * int (x_1 - 1/3)^2 = 2 * 1/36 = 1/18
    u_c = P1Function(REF, np.zeros(3))
    osc = oscillation(u_c, lambda x: x[..., 0], p=2.0)
    assert osc[0] == pytest.approx(1.0 / 18.0, abs=1e-15)


# ---------------------------------------------------------------------------
# F-metric error
# ---------------------------------------------------------------------------

def test_rho_F_exact_affine_is_zero():
    mesh = make_lshape_mesh()
    grad = np.array([1.2, -0.4])
    u = P1Function(mesh, mesh.vertices @ grad)
    for p in (2.0, 1.6):
        val = rho_F_sq(u, lambda x: np.broadcast_to(grad, x.shape), p)
        assert val == pytest.approx(0.0, abs=1e-28)


def test_rho_F_p2_is_gradient_error_norm():
    mesh = make_lshape_mesh()
    u = P1Function(mesh, np.zeros(mesh.num_vertices))
    grad = np.array([1.0, 2.0])
    val = rho_F_sq(u, lambda x: np.broadcast_to(grad, x.shape), p=2.0)
    assert val == pytest.approx(3.0 * 5.0, rel=1e-14)  # |Omega| |grad|^2


def test_rho_F_order8_cross_check():
    mesh = make_lshape_mesh()
    rng = np.random.default_rng(17)
    u = P1Function(mesh, rng.normal(size=mesh.num_vertices))

    def exact_grad(x):
        return np.stack((np.sin(x[..., 0]), x[..., 1] ** 2), axis=-1)

    low = rho_F_sq(u, exact_grad, p=1.6)
    high = rho_F_sq(u, exact_grad, p=1.6, rule=RULE_ORDER8)
    assert high == pytest.approx(low, rel=1e-6)


# ---------------------------------------------------------------------------
# Aitken extrapolation
# ---------------------------------------------------------------------------

def test_aitken_geometric_is_exact():
    k = np.arange(6)
    value, degenerate = aitken_extrapolate(1.0 + 2.0 ** (-k))
    assert not degenerate
    assert value == pytest.approx(1.0, abs=1e-15)
    a, c, q = -0.0745, 0.31, 0.62
    value, degenerate = aitken_extrapolate(a + c * q ** k)
    assert not degenerate
    assert value == pytest.approx(a, abs=1e-12)


def test_aitken_constant_flagged():
    value, degenerate = aitken_extrapolate([4.2, 4.2, 4.2])
    assert degenerate and value == 4.2


def test_aitken_input_validation():
    with pytest.raises(ValueError):
        aitken_extrapolate([1.0, 2.0])


# ---------------------------------------------------------------------------
# refined gap bounds
# ---------------------------------------------------------------------------

def test_gap_bounds_p2_identities():
    mesh, f_h, density, u_cr, z, u_tilde = _converged_pair(p=2.0)
    b_a, b_d = refined_gap_bounds(u_tilde, u_cr, z, density)
    diff = u_tilde.gradients() - u_cr.gradients()
    expect_a = mesh.areas * np.sum(diff ** 2, axis=-1)
    assert np.allclose(b_a, expect_a, atol=1e-15)
    bd = eta_sq(u_tilde, z, density, f_h)
    assert np.allclose(bd.eta_A_sq, 0.5 * b_a, atol=1e-15)
    assert np.allclose(bd.eta_D_sq, 0.5 * b_d, atol=1e-14)


def test_gap_bounds_conforming_candidate_zero():
    mesh = make_lshape_mesh()
    values = np.cos(mesh.vertices[:, 0] + 0.5 * mesh.vertices[:, 1])
    u_tilde = P1Function(mesh, values)
    # the same function as a (conforming) side-midpoint function
    u_cr = CrFunction(mesh, 0.5 * values[mesh.sides].sum(axis=1))
    z = _constant_field(mesh, [0.1, 0.2])
    b_a, _ = refined_gap_bounds(u_tilde, u_cr, z, PPowerDensity(1.6))
    assert np.allclose(b_a, 0.0, atol=1e-15)


def test_gap_bounds_dominate_indicators():
    for p in (1.6, 1.2):
        mesh, f_h, density, u_cr, z, u_tilde = _converged_pair(p=p)
        bd = eta_sq(u_tilde, z, density, f_h)
        b_a, b_d = refined_gap_bounds(u_tilde, u_cr, z, density)
        scale = max(bd.eta_hat_sq_total, 1.0)
        assert np.all(bd.eta_A_sq <= b_a + 1e-10 * scale)
        assert np.all(bd.eta_D_sq <= b_d + 1e-10 * scale)


# ---------------------------------------------------------------------------
# reliability against an overkill reference (p=2)
# ---------------------------------------------------------------------------

def _overkill_gradient_lookup(fine_mesh, fine_u, n):
    """Gradient-evaluating callable for a P1 function on make_square_mesh(n)."""
    grads = fine_u.gradients()

    def exact_grad(points):
        x = np.clip(points[..., 0], 0.0, 1.0 - 1e-12)
        y = np.clip(points[..., 1], 0.0, 1.0 - 1e-12)
        col = (x * n).astype(int)
        row = (y * n).astype(int)
        fx = x * n - col
        fy = y * n - row
        upper = fy > fx          # cells split along the (+1,+1) diagonal
        tri = 2 * (row * n + col) + np.where(upper, 1, 0)
        return grads[tri]

    return exact_grad


def test_gap_dominates_overkill_error_with_convexity_constant():
    # for the quadratic model, strong convexity gives exactly
    # ||grad(u - u_tilde)||^2 = 2 (I(u_tilde) - I(u)) <= 2 (I(u_tilde) - D(z)),
    # i.e. the squared error is bounded by twice the gap indicator total
    coarse = uniform_refine(make_square_mesh(4), 1)
    f_coarse = PwConstant(coarse, np.ones(coarse.num_triangles))
    prob = DiscreteProblem(coarse, P2, f_coarse, space="p1")
    state, rep = newton_solve(prob, tol_abs=1e-12)
    assert rep.converged
    u_tilde = prob.function(state)
    cr = DiscreteProblem(coarse, P2, f_coarse, space="cr")
    cr_state, _ = newton_solve(cr, tol_abs=1e-12)
    z = marini_reconstruct(cr.function(cr_state), P2, f_coarse)

    n_fine = 64
    fine = make_square_mesh(n_fine)
    f_fine = PwConstant(fine, np.ones(fine.num_triangles))
    fine_prob = DiscreteProblem(fine, P2, f_fine, space="p1")
    fine_state, _ = newton_solve(fine_prob, tol_abs=1e-12)
    exact_grad = _overkill_gradient_lookup(fine, fine_prob.function(fine_state),
                                           n_fine)
    rho = rho_F_sq(u_tilde, exact_grad, p=2.0)
    bd = eta_sq(u_tilde, z, P2, f_coarse)
    assert np.all(bd.eta_A_sq >= 0.0)
    assert rho <= 2.0 * bd.eta_sq_total
    assert rho <= 2.0 * bd.eta_hat_sq_total
