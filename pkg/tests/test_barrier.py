"""Barrier function, its Leray section and the H kernel."""

import numpy as np
import pytest

from crlab.barrier import (
    Barrier,
    check_h_vanishing,
    h_kernel,
    interpolated_section,
    mu_chi_split,
    probes_near_M,
    re_phi_model,
    verify_barrier,
    verify_re_phi_taylor,
)
from crlab.errors import DegreeOutOfRange, SingularPoint
from crlab.forms import Probe


@pytest.mark.parametrize("name", ["hyperquadric", "sig22", "codim2"])
def test_phi_decomposes_into_A_and_F(barriers, name, rng):
    B = barriers(name)
    p = probes_near_M(B, rng, 20)
    d = B.evaluate(p.zeta, p.z)
    rhs = d["calA"] + sum(d["theta"][..., k] * d["F"][k] for k in range(B.m))
    assert np.allclose(d["Phi"], rhs)


@pytest.mark.parametrize("name", ["hyperquadric", "sig22", "codim2"])
def test_p_over_phi_is_a_leray_section(barriers, name, rng):
    B = barriers(name)
    assert B.section().check(probes_near_M(B, rng, 50)) < 1e-12


def test_section_rejects_diagonal(barriers, bundled):
    B = barriers("hyperquadric")
    z = bundled("hyperquadric").sample_points(np.random.default_rng(0), 2, 0.2)
    with pytest.raises(SingularPoint):
        interpolated_section(B).value(Probe(z, z, np.zeros(2)))


def test_barrier_positive_on_pseudoconcave_quadric(barriers):
    rep = verify_barrier(barriers("hyperquadric"), samples=200, refine=1)
    assert rep.passed and rep.min_ratio > 0.1


def test_wrong_sign_barrier_fails(bundled):
    rep = verify_barrier(Barrier(bundled("hyperquadric"), 1, theta_sign=-1.0), samples=200, refine=3)
    assert not rep.passed and rep.min_ratio < 1e-6


def test_re_phi_taylor_slope(barriers, bundled, rng):
    B = barriers("hyperquadric")
    z = bundled("hyperquadric").sample_points(rng, 1, 0.2)[0]
    slope, res = verify_re_phi_taylor(B, z, np.array([1.0, 0.5j, 0.3]))
    assert abs(slope - 3.0) < 0.2


def test_re_phi_model_exact_on_flat(barriers, rng):
    B = barriers("flat")
    p = probes_near_M(B, rng, 20, dist=(0.01, 0.1))
    phi = B.phi_values(p.zeta, p.z)
    assert np.abs(phi.real - re_phi_model(B, p.zeta, p.z)).max() < 1e-14


def test_h_kernel_vanishes_below_q(barriers, rng):
    B = barriers("sig22")
    p = probes_near_M(B, rng, 20)
    absolute, scaled = check_h_vanishing(B, 1, p)
    assert scaled < 1e-12
    control, _ = check_h_vanishing(B, 2, p)
    assert control > 1e-4


def test_h_kernel_degree_range(barriers):
    with pytest.raises(DegreeOutOfRange):
        h_kernel(barriers("hyperquadric"), 0)
    with pytest.raises(DegreeOutOfRange):
        h_kernel(barriers("hyperquadric"), 3)


def test_mu_chi_split_codim2(barriers, rng):
    B = barriers("codim2")
    r = mu_chi_split(B, probes_near_M(B, rng, 10))
    # the theta-dependent parts are genuinely present and matched
    assert r["mu_nu_max"] > 1e-2 and r["chi_max"] > 1e-2
    assert r["residual_A"] < 1e-12 and r["residual_Q"] < 1e-12
