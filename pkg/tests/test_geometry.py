"""Defining systems, Levi forms, graph charts, tube grids and covers."""

from math import gamma, pi

import numpy as np
import pytest

from conftest import quadric
from crlab.errors import ConfigInvalid, CoverMismatch, EigenvalueTie, EmptyGrid, SamplingTooCoarse
from crlab.geometry import (
    AtlasCover,
    DefiningSystem,
    ExplicitCover,
    certify_q_pseudoconcave,
    complex_sphere_rule,
    directional_levi,
    fit_graph,
    levi_form,
    load_bundled,
    negative_subspaces,
    tube_grid,
)
from crlab.poly import Poly


def test_levi_form_of_hyperquadric_at_origin(bundled):
    M = bundled("hyperquadric")
    H = levi_form(M.rho[0], np.zeros(3, complex))
    assert np.allclose(H, np.diag([0.0, -1.0, 1.0]))


@pytest.mark.parametrize("theta", [1.0, -1.0])
def test_directional_levi_hyperquadric(bundled, theta):
    d = directional_levi(bundled("hyperquadric"), [theta], np.zeros(3, complex))
    assert np.allclose(d.eigenvalues, [-1.0, 1.0])
    assert d.negative_count == 1
    # eigenvectors lie in the complex tangent space
    assert np.allclose(bundled("hyperquadric").jacobian(np.zeros(3, complex)) @ d.eigenvectors, 0)


def test_sig22_has_two_negative_directions(bundled, rng):
    M = bundled("sig22")
    for z in M.sample_points(rng, 5, 0.2):
        for th in (1.0, -1.0):
            assert directional_levi(M, [th], z).negative_count == 2


def test_certificate_passes_for_pseudoconcave(bundled):
    c = certify_q_pseudoconcave(bundled("hyperquadric"), 1)
    assert c.passed and c.q_attained == 1 and c.margin > 0.5


def test_certificate_is_monotone_in_q(bundled):
    M = bundled("sig22")
    assert certify_q_pseudoconcave(M, 2).passed
    assert certify_q_pseudoconcave(M, 1).passed
    assert not certify_q_pseudoconcave(M, 3).passed


def test_certificate_fails_for_definite_levi_form():
    M = quadric([-1.0, -1.0])
    c = certify_q_pseudoconcave(M, 1)
    assert not c.passed and c.q_attained == 0


def test_certificate_codim2(bundled):
    assert certify_q_pseudoconcave(bundled("codim2"), 1).passed


def test_sign_change_between_samples_raises():
    n = 3
    z2, z3 = Poly.var(n, 1), Poly.var(n, 2)
    rho = Poly.x(n, 0) - z2 * z2.conj() + Poly.x(n, 1) * z3 * z3.conj() * 4.0
    M = DefiningSystem(n, 1, [rho])
    thetas = np.array([[1.0]])
    pts = M.graph.point(np.zeros((2, 1)), np.array([[-0.2, 0.0], [0.2, 0.0]], complex))
    with pytest.raises(SamplingTooCoarse):
        certify_q_pseudoconcave(M, 1, (thetas, pts))


def test_empty_sample_set_raises(bundled):
    with pytest.raises(EmptyGrid):
        certify_q_pseudoconcave(bundled("hyperquadric"), 1, (np.zeros((0, 1)), np.zeros((0, 3))))


def test_negative_subspaces_split(bundled):
    M = bundled("hyperquadric")
    s = negative_subspaces(M, [1.0], np.zeros(3, complex), 1)
    assert s.E.shape == (3, 2) and s.a.shape == (1, 3)
    basis = np.concatenate([s.E, s.a.conj().T], axis=1)
    assert np.allclose(basis.conj().T @ basis, np.eye(3))
    assert s.negativity < 0 and s.positivity > 0


def test_eigenvalue_tie_at_cut_raises():
    with pytest.raises(EigenvalueTie):
        negative_subspaces(quadric([-1.0, -1.0]), [1.0], np.zeros(3, complex), 1)


def test_graph_of_paraboloid():
    M = quadric([-1.0])  # x1 = |z2|^2
    ch = fit_graph(M)
    Y = np.array([[0.1], [-0.2]])
    W = np.array([[0.3 + 0.1j], [-0.1 + 0.2j]])
    assert np.allclose(ch.phi(Y, W)[:, 0], np.abs(W[:, 0]) ** 2, atol=1e-13)


def test_graph_of_codim2(bundled, rng):
    M = bundled("codim2")
    z = M.sample_points(rng, 20, 0.3)
    z3, z4 = z[:, 2], z[:, 3]
    assert np.allclose(z[:, 0].real, np.abs(z3) ** 2 - np.abs(z4) ** 2, atol=1e-12)
    assert np.allclose(z[:, 1].real, 2 * (z3 * np.conj(z4)).real, atol=1e-12)
    assert np.abs(M.rho_values(z)).max() < 1e-12


def test_non_real_defining_function_rejected():
    with pytest.raises(ConfigInvalid):
        DefiningSystem(2, 1, [Poly.var(2, 0)])


def test_round_trip_through_dict(bundled):
    M = bundled("codim2")
    M2 = DefiningSystem.from_dict(M.to_dict())
    z = M.sample_points(np.random.default_rng(1), 5, 0.3)
    assert np.allclose(M2.rho_values(z), M.rho_values(z))


@pytest.mark.parametrize("name", ["flat", "hyperquadric", "sig22", "codim2"])
def test_bundled_manifolds_are_nondegenerate(name):
    M = load_bundled(name)
    pts = M.sample_points(np.random.default_rng(0), 30)
    assert M.nondegeneracy(pts).min() > M.floor


def test_tube_grid_lies_on_level_set(bundled):
    M = bundled("hyperquadric")
    g = tube_grid(M, 0.01, 3)
    assert np.allclose(M.rho_values(g.zeta), -g.theta * 0.01, atol=1e-12)
    assert np.all(g.weights > 0)


def test_tube_grid_empty():
    with pytest.raises(EmptyGrid):
        tube_grid(quadric([-1.0]), 0.01, 0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_complex_sphere_rule_moments(k):
    pts, w = complex_sphere_rule(k, 6, 4)
    area = 2 * pi**k / gamma(k)
    z = pts[:, :k] + 1j * pts[:, k:]
    assert np.isclose(w.sum(), area)
    assert np.allclose(np.sum(np.abs(z) ** 2, 1), 1)
    assert abs(np.sum(w * z[:, 0])) < 1e-12
    assert np.isclose(np.sum(w * np.abs(z[:, 0]) ** 2), area / k)
    assert np.isclose(np.sum(w * np.abs(z[:, 0]) ** 4), 2 * area / (k * (k + 1)))


def test_atlas_cover_partition(bundled, rng):
    M = bundled("hyperquadric")
    cover = AtlasCover([np.zeros(3), M.graph.point(np.zeros(1), np.array([0.2, 0.0]))], [0.3, 0.3])
    pts = M.sample_points(rng, 40, 0.15)
    assert cover.validate(pts)
    total = cover.theta(0, pts) + cover.theta(1, pts)
    assert np.allclose(total, 1)


def test_uncovered_point_raises():
    cover = AtlasCover([np.zeros(2)], [0.1])
    with pytest.raises(CoverMismatch):
        cover.validate(np.array([[0.5, 0.0]], complex))


def test_explicit_cover_mismatch():
    half = lambda z, zb: 0.5 * np.ones(len(z))
    cover = ExplicitCover([half, half, half], [half] * 3)
    with pytest.raises(CoverMismatch):
        cover.validate(np.zeros((4, 2), complex))
