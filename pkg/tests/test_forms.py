"""Exterior algebra, Leray sections and the Cauchy-Fantappie forms."""

import numpy as np
import pytest

from crlab.barrier import interpolated_section, probes_near_M
from crlab.errors import BadCoordinateFrame, DegreeOutOfRange, LerayViolation
from crlab.forms import (
    GradedForm,
    MForm,
    Probe,
    bochner_martinelli,
    dbar_M,
    extend,
    field_from_function,
    kernel_identity_residuals,
    lab_t,
    lab_zbar,
    lab_zeta,
    lab_zetabar,
    omega_prime,
    omega_prime_r,
    split_derivative,
    wedge,
)


def _probe(zeta, z, t=0.5):
    zeta = np.atleast_2d(np.asarray(zeta, complex))
    z = np.atleast_2d(np.asarray(z, complex))
    return Probe(zeta, z, np.full(len(zeta), t))


def test_wedge_is_graded_antisymmetric():
    n = 3
    a = GradedForm.monomial(n, [lab_zetabar(n, 0)])
    b = GradedForm.monomial(n, [lab_zbar(n, 1), lab_t(n)])
    c = GradedForm.monomial(n, [lab_zbar(n, 2)])
    ab, ba = wedge(a, b), wedge(b, a)
    assert all(ab.terms[k] == ba.terms[k] for k in ab.terms)  # 1-form with 2-form commutes
    ac, ca = wedge(a, c), wedge(c, a)
    assert all(ac.terms[k] == -ca.terms[k] for k in ac.terms)
    assert not wedge(a, a).terms


def test_bochner_martinelli_at_unit_vector():
    # b = (1, 0) at zeta = (1, 0), z = 0: omega'(b) = dzetabar_2 - dzbar_2
    n = 2
    f = omega_prime(bochner_martinelli(n), holomorphic=False).evaluate(_probe([1, 0], [0, 0]))
    vals = {k: complex(np.ravel(v)[0]) for k, v in f.terms.items() if abs(np.ravel(v)[0]) > 1e-14}
    assert vals == {(lab_zetabar(n, 1),): 1.0, (lab_zbar(n, 1),): -1.0}


def test_bm_leray_condition(rng):
    p = Probe.random(rng, 50, 3)
    assert bochner_martinelli(3).check(p) < 1e-14


def test_scaled_section_violates_leray(rng):
    p = Probe.random(rng, 10, 2)
    bad = bochner_martinelli(2).scaled(2.0)
    with pytest.raises(LerayViolation):
        omega_prime(bad).evaluate(p)


def test_graded_parts_sum_to_full_form(rng):
    n = 3
    s = bochner_martinelli(n)
    p = Probe.random(rng, 20, n)
    full = omega_prime(s, holomorphic=False).evaluate(p)
    total = GradedForm(n)
    for r in range(n):
        part = omega_prime_r(s, r, with_t=True).evaluate(p)
        # each part has exactly r dzbar factors
        assert all(part.zbar_degree(k) == r for k in part.terms)
        total = total + part
    assert (total - full).max_abs() < 1e-12 * full.max_abs()


def test_degree_out_of_range():
    with pytest.raises(DegreeOutOfRange):
        omega_prime_r(bochner_martinelli(2), 2)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_kernel_identities_bochner_martinelli(n, rng):
    res = kernel_identity_residuals(bochner_martinelli(n), Probe.random(rng, 100, n))
    assert max(res.values()) < 1e-10


def test_kernel_identities_interpolated_section(barriers, rng):
    B = barriers("hyperquadric")
    res = kernel_identity_residuals(interpolated_section(B), probes_near_M(B, rng, 100))
    assert max(res.values()) < 1e-8


def test_split_derivative_of_a_function(rng):
    # f = t * zetabar_1 * zbar_2: d_t f = zetabar_1 zbar_2 dt
    n = 2
    F = field_from_function(n, lambda v: v["t"] * v["zetabar"][..., 0] * v["zbar"][..., 1], [])
    p = Probe.random(rng, 5, n)
    dt = split_derivative(F, "d_t").evaluate(p)
    dzb = split_derivative(F, "dbar_zeta").evaluate(p)
    dz = split_derivative(F, "dbar_z").evaluate(p)
    zb, wb = np.conj(p.zeta), np.conj(p.z)
    assert np.allclose(dt.terms[(lab_t(n),)], zb[:, 0] * wb[:, 1])
    assert np.allclose(dzb.terms[(lab_zetabar(n, 0),)], p.t * wb[:, 1])
    assert np.allclose(dz.terms[(lab_zbar(n, 1),)], p.t * zb[:, 0])


def test_holomorphic_differentials_are_kept_on_request(rng):
    n = 2
    f = omega_prime(bochner_martinelli(n), holomorphic=True).evaluate(Probe.random(rng, 3, n))
    assert any(lab_zeta(n, 0) in k or lab_zeta(n, 1) in k for k in f.terms)


def test_dbar_M_on_flat_chart(bundled):
    M = bundled("flat")
    g = MForm.tangential(M.graph, {(2,): lambda Y, W, Wb: Wb[..., 0] * W[..., 1]})
    Y, W = np.array([[0.1]]), np.array([[0.2 + 0.1j, -0.1 + 0.3j]])
    out = dbar_M(g).evaluate(Y, W)
    assert np.allclose(out[(("Wb", 0), ("Wb", 1))], W[:, 1])


def test_dbar_M_squares_to_zero(bundled, rng):
    M = bundled("sig22")
    g = MForm.tangential(
        M.graph,
        {
            (2,): lambda Y, W, Wb: Y[..., 0] * Wb[..., 0] * W[..., 2],
            (3,): lambda Y, W, Wb: Y[..., 0] * Y[..., 0] * Wb[..., 1],
        },
    )
    dg = dbar_M(g)
    Y = rng.normal(size=(5, 1)) * 0.1
    W = (rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))) * 0.1
    assert max(np.abs(v).max() for v in dg.evaluate(Y, W).values()) > 1e-3
    assert max(np.abs(v).max() for v in dbar_M(dg).evaluate(Y, W).values()) < 1e-14


def test_extension_rejects_dx(bundled):
    g = MForm(bundled("hyperquadric").graph, {(("X", 0),): lambda Y, W, Wb: 1.0})
    with pytest.raises(BadCoordinateFrame):
        extend(g)
