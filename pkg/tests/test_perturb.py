"""Near-identity maps, their inverses and the graph refit."""

import numpy as np
import pytest

from crlab.errors import ConfigInvalid, ContractionViolated
from crlab.homotopy import TestFormLibrary
from crlab.perturb import (
    PerturbationMap,
    ball_lattice,
    compare_dbar_transport,
    graph_delta,
    inverse_after_forward,
    invert_near_identity,
)


def test_ball_lattice_inside_ball():
    u = ball_lattice(4, 0.7, per_dim=5)
    assert np.linalg.norm(u, axis=1).max() <= 0.7 + 1e-12
    assert np.isclose(np.linalg.norm(u, axis=1).max(), 0.7)


def test_norm_of_scaled_identity():
    f = PerturbationMap.linear(0.03j * np.eye(2))
    assert np.isclose(f.norm(0), 0.03)
    assert np.isclose(f.norm(1), 0.03)
    assert f.norm(2) == f.norm(1)


def test_constant_map_inverts_exactly():
    c = np.array([0.01, -0.005j, 0.002])
    G = invert_near_identity(PerturbationMap.constant(c))
    pts = np.array([[0.1, 0.2j, -0.3]])
    assert np.allclose(G.backward(pts), pts - c, atol=1e-16)


def test_linear_map_inverse(rng):
    A = 0.01 * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))) / 3
    f = PerturbationMap.linear(A)
    G = invert_near_identity(f)
    z = (rng.normal(size=(5, 3)) + 1j * rng.normal(size=(5, 3))) * 0.2
    assert np.allclose(G.backward(z), np.linalg.solve(np.eye(3) + A, z.T).T, atol=1e-14)
    assert G.report.envelope_ok


@pytest.mark.parametrize("n", [2, 3])
def test_random_map_round_trip(n, rng):
    f = PerturbationMap.random(n, rng).normalized(0.01)
    G = invert_near_identity(f, per_dim=5)
    rep = G.report
    assert rep.residual < 1e-12 and rep.envelope_ok
    assert inverse_after_forward(G, per_dim=5) < 1e-12
    # increments decay geometrically
    assert rep.increments[1] < rep.increments[0] * 4 * n * 0.01 * 1.001


def test_contraction_gate(rng):
    f = PerturbationMap.random(2, rng).normalized(0.2)
    with pytest.raises(ContractionViolated):
        invert_near_identity(f)


def test_bad_component_spec():
    with pytest.raises(ConfigInvalid):
        PerturbationMap.from_dict({"n": 1, "components": ["x"]})


def test_zero_perturbation_leaves_graph(bundled):
    out = graph_delta(bundled("hyperquadric"), PerturbationMap.zero(3), k=1, per_dim=3)
    assert max(out["delta_norms"]) < 1e-14


def test_constant_shift_moves_graph_rigidly(bundled):
    s = 0.01
    out = graph_delta(bundled("hyperquadric"), PerturbationMap.constant([s, 0, 0]), k=1, per_dim=3)
    assert abs(out["delta_norms"][0] - s) < 1e-14
    assert out["delta_norms"][1] < 1e-13


def test_graph_delta_linear_in_small_perturbation(bundled, rng):
    M0 = bundled("hyperquadric")
    f = PerturbationMap.random(3, rng, real=False).normalized(0.01)
    a = graph_delta(M0, f, k=1, per_dim=3)["delta_norms"][1]
    b = graph_delta(M0, f.scaled(0.5), k=1, per_dim=3)["delta_norms"][1]
    assert abs(a / b - 2) < 0.1


def test_transport_commutes_with_dbar_on_same_manifold(bundled):
    M0 = bundled("hyperquadric")
    h = TestFormLibrary(M0.graph).form("bump_dzbar2")
    out = compare_dbar_transport(h, M0, M0, per_dim=3)
    assert out["c1"] < 1e-14
