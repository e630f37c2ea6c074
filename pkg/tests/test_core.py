"""Polynomials, jets and the determinant kernels."""

import numpy as np
import pytest

from crlab import jet as J
from crlab import kernels
from crlab.jet import Jet
from crlab.poly import Poly, eval_matrix, hessian_mixed


def _fd(fn, z, j, conj, h=1e-6):
    """Wirtinger derivative by central differences in x_j and y_j."""
    e = np.zeros_like(z)
    e[..., j] = 1.0
    dx = (fn(z + h * e) - fn(z - h * e)) / (2 * h)
    dy = (fn(z + 1j * h * e) - fn(z - 1j * h * e)) / (2 * h)
    return 0.5 * (dx + 1j * dy) if conj else 0.5 * (dx - 1j * dy)


def test_poly_real_terms_round_trip():
    terms = [{"coeff": 1.0, "exponents": [1, 0, 0, 0]}, {"coeff": -2.0, "exponents": [0, 2, 0, 1]}]
    p = Poly.from_real_terms(2, terms)
    assert p.is_real()
    q = Poly.from_real_terms(2, p.to_real_terms())
    z = np.array([[0.3 + 0.1j, -0.2 + 0.4j]])
    assert np.allclose(p.evaluate(z), q.evaluate(z))
    # x1 - 2 x2^2 y2
    x, y = z.real[0], z.imag[0]
    assert np.isclose(p.evaluate(z)[0], x[0] - 2 * x[1] ** 2 * y[1])


def test_poly_wirtinger_derivatives(rng):
    n = 3
    z1, z2, z3 = (Poly.var(n, j) for j in range(n))
    p = z1 * z2.conj() * z3 + z2 * z2 * z3.conj() + Poly.const(n, 2.0)
    z = rng.normal(size=(4, n)) + 1j * rng.normal(size=(4, n))
    for j in range(n):
        assert np.allclose(p.d_zeta(j).evaluate(z), _fd(p.evaluate, z, j, False), atol=1e-7)
        assert np.allclose(p.d_zetabar(j).evaluate(z), _fd(p.evaluate, z, j, True), atol=1e-7)


def test_levi_matrix_of_norm_squared_is_identity():
    n = 3
    p = sum((Poly.var(n, j) * Poly.var(n, j, True) for j in range(1, n)), Poly.var(n, 0) * Poly.var(n, 0, True))
    H = eval_matrix(hessian_mixed(p), np.zeros((1, n), complex))[0]
    assert np.allclose(H, np.eye(n))


def test_jet_product_and_quotient_rules():
    x = np.array([0.7 + 0.2j, -1.1 + 0.5j])
    a = Jet.seed(x, d1=np.ones((1, 2)))
    f = (a * a + 1.0) / a
    assert np.allclose(f.val, (x * x + 1) / x)
    assert np.allclose(f.d1[0], 1 - 1 / x**2)


def test_jet_mixed_second_derivative():
    # f(s, t) = exp(s t) at s = t = 0.5: d2f/dsdt = (1 + s t) exp(s t)
    s = Jet.seed(np.array(0.5 + 0j), d1=np.ones(1))
    t = Jet.seed(np.array(0.5 + 0j), d2=np.ones(1))
    f = (s * t).exp()
    assert np.isclose(f.d12[0, 0], 1.25 * np.exp(0.25))


def test_jet_matrix_inverse_derivative(rng):
    A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    dA = rng.normal(size=(3, 3))
    Aj = Jet.seed(A.astype(complex), d1=dA[None].astype(complex))
    inv = Aj.inv()
    Ai = np.linalg.inv(A)
    assert np.allclose(inv.val, Ai)
    assert np.allclose(inv.d1[0], -Ai @ dA @ Ai)


def test_matrix_sign_of_hermitian(rng):
    X = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    H = X + X.conj().T
    w, V = np.linalg.eigh(H)
    S = J.matrix_sign(H)
    assert np.allclose(J.value(S), V @ np.diag(np.sign(w)) @ V.conj().T, atol=1e-10)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_batched_det_matches_numpy(n, rng):
    M = rng.normal(size=(50, n, n)) + 1j * rng.normal(size=(50, n, n))
    assert np.allclose(kernels.batched_det(M), np.linalg.det(M))


@pytest.mark.parametrize("n", [2, 4])
def test_det_jet_is_jacobi_formula(n, rng):
    M = rng.normal(size=(20, n, n)) + 1j * rng.normal(size=(20, n, n))
    dM = rng.normal(size=(20, 3, n, n)) + 1j * rng.normal(size=(20, 3, n, n))
    d, dd = kernels.det_jet(M, dM)
    ref = np.einsum("bij,bkji->bk", np.linalg.inv(M), dM) * np.linalg.det(M)[:, None]
    assert np.allclose(d, np.linalg.det(M))
    assert np.allclose(dd, ref)


@pytest.mark.skipif(kernels.compiled_kernels is None, reason="compiled extension not built")
def test_compiled_and_numpy_kernels_agree(rng):
    M = rng.normal(size=(30, 4, 4)) + 1j * rng.normal(size=(30, 4, 4))
    dM = rng.normal(size=(30, 2, 4, 4)) + 0j
    a = kernels.compiled_kernels["det_jet"](M, dM)
    b = kernels.numpy_kernels["det_jet"](M, dM)
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def test_empty_batches():
    assert kernels.batched_det(np.zeros((0, 3, 3))).shape == (0,)
