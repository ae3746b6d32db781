"""Tests for the convex densities, conjugates, and load potentials.

Conjugate oracle: a dense 1D grid maximization of ``s t - psi(t)`` over the
radial profile (the densities are radial, so the two-dimensional conjugate
reduces to one dimension).
"""

from __future__ import annotations

import numpy as np
import pytest

from pdgap.energy_models import (KAPPA, LoadPotential, OptimalDesignDensity,
                                 PPowerDensity, check_fenchel_young, fmap)
from pdgap.fespaces import PwConstant, Rt0Field, project_pw
from pdgap.mesh import make_lshape_mesh

P_VALUES = (1.2, 1.6, 2.0, 3.0)


def _grid_sup_conjugate(psi, s: float, tmax: float, n: int = 400001) -> float:
    t = np.linspace(0.0, tmax, n)
    return float(np.max(s * t - psi(t)))


@pytest.mark.parametrize("p", P_VALUES)
def test_ppower_conjugate_against_grid_sup(p):
    d = PPowerDensity(p)
    worst = 0.0
    for s in np.linspace(0.05, 2.0, 21):
        tstar = s ** (d.q - 1.0)
        got = _grid_sup_conjugate(lambda t: t ** p / p, s, max(2.0 * tstar, 1.0))
        worst = max(worst, abs(got - s ** d.q / d.q))
    assert worst < 1e-6


def test_optimal_design_conjugate_against_grid_sup():
    od = OptimalDesignDensity()
    worst = 0.0
    for s in np.linspace(0.01, 1.0, 40):
        got = _grid_sup_conjugate(od.psi, s, 3.0)
        worst = max(worst, abs(got - od.psi_star(float(s))))
    assert worst < 1e-6


@pytest.mark.parametrize("p", P_VALUES)
def test_fenchel_young_ppower(p):
    d = PPowerDensity(p)
    rng = np.random.default_rng(0)
    a = rng.standard_normal((10000, 2)) * rng.uniform(0.01, 3.0, (10000, 1))
    b = rng.standard_normal((10000, 2)) * rng.uniform(0.01, 3.0, (10000, 1))
    assert check_fenchel_young(d, a, b).min() > -1e-12
    equality = check_fenchel_young(d, a, d.dphi(a))
    assert np.abs(equality).max() < 1e-9


def test_fenchel_young_optimal_design_incl_plateau():
    od = OptimalDesignDensity()
    rng = np.random.default_rng(1)
    a = rng.standard_normal((10000, 2)) * rng.uniform(0.0, 0.5, (10000, 1))
    b = rng.standard_normal((10000, 2)) * rng.uniform(0.0, 1.0, (10000, 1))
    assert check_fenchel_young(od, a, b).min() > -1e-12
    assert np.abs(check_fenchel_young(od, a, od.dphi(a))).max() < 1e-9


@pytest.mark.parametrize("p", P_VALUES)
def test_conjugate_gradient_roundtrip(p):
    d = PPowerDensity(p)
    rng = np.random.default_rng(2)
    a = rng.standard_normal((1000, 2)) * rng.uniform(0.05, 2.0, (1000, 1))
    assert np.abs(d.dphi_star(d.dphi(a)) - a).max() < 1e-10
    assert np.allclose(d.dphi(np.zeros(2)), 0.0)
    assert d.phi_star(np.zeros(2)) == 0.0


def test_optimal_design_profile_continuity():
    od = OptimalDesignDensity()
    assert np.isclose(od.t2, 2.0 * od.t1)
    eps = 1e-12
    for t0 in (od.t1, od.t2):
        below = float(od.psi(t0 * (1 - eps)))
        above = float(od.psi(t0 * (1 + eps)))
        assert abs(below - above) < 1e-10
        below = float(od.psi_prime(t0 * (1 - eps)))
        above = float(od.psi_prime(t0 * (1 + eps)))
        assert abs(below - above) < 1e-10
    s = od.s_star
    assert abs(od.psi_star(s * (1 - 1e-10)) - od.psi_star(s * (1 + 1e-10))) < 1e-10


def test_optimal_design_plateau_and_kink():
    od = OptimalDesignDensity()
    r_mid = 0.5 * (od.t1 + od.t2)
    a = np.array([r_mid, 0.0])
    b = od.dphi(a)
    assert np.isclose(np.hypot(*b), od.s_star)
    # mapping back through the conjugate picks the subdifferential midpoint
    back = od.dphi_star(b)
    assert np.isclose(np.hypot(*back), 0.5 * (od.t1 + od.t2))
    # off the kink, the conjugate gradient inverts the gradient
    for r in (0.5 * od.t1, 2.0 * od.t2):
        a = np.array([0.0, r])
        assert np.allclose(od.dphi_star(od.dphi(a)), a, atol=1e-12)


def test_cocoercivity_bregman_form():
    """phi(a) - phi(b) - dphi(b).(a-b) >= |dphi(a) - dphi(b)|^2 / (2 L) with
    L the gradient Lipschitz modulus (mu2 for the design density, 1 for the
    quadratic density)."""
    rng = np.random.default_rng(3)
    a = rng.standard_normal((10000, 2)) * rng.uniform(0.0, 0.6, (10000, 1))
    b = rng.standard_normal((10000, 2)) * rng.uniform(0.0, 0.6, (10000, 1))
    for d in (OptimalDesignDensity(), PPowerDensity(2.0)):
        bregman = d.phi(a) - d.phi(b) - np.sum(d.dphi(b) * (a - b), axis=-1)
        lower = np.sum((d.dphi(a) - d.dphi(b)) ** 2, axis=-1) \
            / (2.0 * d.grad_lipschitz)
        assert (bregman - lower).min() > -1e-12


@pytest.mark.parametrize("model", ["p1.6", "p2", "od"])
def test_hessian_matches_finite_differences(model):
    d = {"p1.6": PPowerDensity(1.6), "p2": PPowerDensity(2.0),
         "od": OptimalDesignDensity()}[model]
    rng = np.random.default_rng(4)
    h = 1e-7
    checked = 0
    while checked < 20:
        a = rng.standard_normal(2) * 0.5
        if isinstance(d, OptimalDesignDensity):
            r = np.hypot(*a)
            if min(abs(r - d.t1), abs(r - d.t2)) < 1e-3:
                continue  # Hessian jumps across the kink radii
        fd = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[:, j] = (d.dphi(a + e) - d.dphi(a - e)) / (2.0 * h)
        assert np.abs(fd - d.d2phi(a)).max() < 1e-5
        checked += 1


def test_regularized_hessian_finite_at_origin():
    d = PPowerDensity(1.2)
    hess = d.d2phi(np.zeros(2))
    assert np.all(np.isfinite(hess))
    assert np.allclose(hess, KAPPA ** (1.2 - 2.0) * np.eye(2))


def test_slope_ratio():
    d = PPowerDensity(1.6)
    t = np.array([0.0, 0.5, 2.0])
    assert np.allclose(d.slope_ratio(t)[1:], t[1:] ** (-0.4), rtol=1e-9)
    assert np.isfinite(d.slope_ratio(t)[0])
    od = OptimalDesignDensity()
    assert od.slope_ratio(0.0) == od.mu2
    assert np.isclose(od.slope_ratio(3.0 * od.t2), od.mu1)
    t_mid = 0.5 * (od.t1 + od.t2)
    assert np.isclose(od.slope_ratio(t_mid), od.s_star / t_mid)
    # slope_ratio(t) * t == psi'(t) away from zero
    tt = np.linspace(0.01, 1.0, 50)
    assert np.allclose(od.slope_ratio(tt) * tt, od.psi_prime(tt))


def test_fmap():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((200, 2))
    for p in (1.2, 1.6, 2.0):
        F = fmap(p, a)
        # |F(a)|^2 = |a|^p, and F preserves direction
        assert np.allclose(np.sum(F ** 2, -1), np.sum(a ** 2, -1) ** (p / 2))
        cosine = np.sum(F * a, -1) / np.sqrt(np.sum(F ** 2, -1) * np.sum(a ** 2, -1))
        assert np.allclose(cosine, 1.0)
    assert np.allclose(fmap(1.6, np.zeros(2)), 0.0)


def test_load_potential():
    mesh = make_lshape_mesh()
    load = LoadPotential(project_pw(mesh, lambda p: np.ones(p.shape[:-1])))
    from pdgap.fespaces import P1Function
    v = P1Function(mesh, 2.0 * np.ones(mesh.num_vertices))
    assert np.isclose(load.pairing(v), 2.0 * 3.0)  # f=1 times v=2 over area 3

    # a field with divergence exactly -f is feasible; scaling it is not
    coeffs = np.einsum("sd,sd->s", -0.5 * mesh.side_midpoints, mesh.side_normals)
    z = Rt0Field(mesh, coeffs)  # z = -x/2 has div = -1
    assert load.feasibility_violation(z) < 1e-14
    assert load.is_feasible(z)
    assert not load.is_feasible(Rt0Field(mesh, 1.1 * coeffs))
