"""Discrete operator algebra."""

import numpy as np
import pytest
from scipy.linalg import block_diag

from crlab.discrete import (
    DiscreteOp,
    assemble_Q,
    build_corrections,
    chain_residual,
    kernel_chain,
    neumann_invert,
    null_dim,
    sup_norm,
    toy_chain,
)
from crlab.errors import ContractionViolated, RankDeficient, ThresholdAmbiguous


def _jordan(n):
    return np.diag(np.ones(n - 1), 1)


def test_sup_norm():
    assert sup_norm(np.array([[1, -2], [0.5, 0.5]])) == 3.0


def test_kernel_chain_of_nilpotent_blocks(rng):
    # blocks 3 and 1 plus an invertible 2x2 block: dims 2, 3, 4, 4
    A = block_diag(_jordan(3), _jordan(1), np.eye(2))
    S = rng.normal(size=(6, 6))
    A = S @ A @ np.linalg.inv(S)
    out = kernel_chain(A, max_power=5)
    assert out["dims"] == [2, 3, 4, 4, 4]
    assert out["stabilized_at"] == 3


def test_kernel_chain_of_invertible(rng):
    assert kernel_chain(np.eye(4) + 0.1 * rng.normal(size=(4, 4)), 3) == {"dims": [0, 0, 0], "stabilized_at": 1}


def test_ambiguous_threshold():
    with pytest.raises(ThresholdAmbiguous):
        null_dim(np.diag([1.0, 2e-8]))


def test_neumann_inverse(rng):
    F = np.eye(5) + 0.02 * rng.normal(size=(5, 5))
    D = neumann_invert(F, np.eye(5))
    assert sup_norm(D.matrix @ F - np.eye(5)) < 1e-10
    assert D.provenance["residual"] < 1e-10 and D.provenance["contraction"] < 0.25


def test_neumann_rejects_large_contraction(rng):
    F = np.eye(4) + 0.5 * np.ones((4, 4))
    with pytest.raises(ContractionViolated):
        neumann_invert(F, np.eye(4))


def test_corrections_make_F_identity_on_toy_chain():
    c = toy_chain()
    fc = build_corrections(c["dbar0"], c["dbar1"], c["P_r"], c["P_r1"])
    assert np.allclose(fc.F.matrix, np.eye(3))


def test_corrections_biorthogonal(rng):
    # exact sequence C^2 -> C^3 -> C^2 with random homotopy guesses
    d0 = np.array([[1.0, 0], [0, 1], [0, 0]])
    d1 = np.array([[0, 0, 1.0], [0, 0, 0]])
    g = np.array([[1.0], [0.0]])
    f = np.array([[0.0], [0.0], [1.0]])
    R_r = rng.normal(size=(2, 3))
    R_r1 = rng.normal(size=(3, 2))
    fc = build_corrections(d0, d1, R_r, R_r1, g=g, f=f)
    assert fc.biorthogonality(d0, d1) < 1e-12
    assert np.allclose(fc.alpha @ f, 0)


def test_dependent_correction_basis_rejected():
    d0 = np.array([[1.0, 0], [0, 1], [0, 0]])
    d1 = np.zeros((2, 3))
    with pytest.raises(RankDeficient):
        build_corrections(d0, d1, np.zeros((2, 3)), np.zeros((3, 2)), g=np.array([[1.0, 2.0], [1.0, 2.0]]))


@pytest.mark.parametrize("perturb", [0.0, 0.025])
def test_assemble_Q_on_toy_chain(perturb):
    c = toy_chain(perturb, seed=3)
    F = c["dbar0"] @ c["P_r"] + c["P_r1"] @ c["dbar1"]
    D = neumann_invert(F, np.eye(3))
    Q_r, Q_r1 = assemble_Q(c["P_r"], c["P_r1"], c["dbar0"], D)
    assert chain_residual(Q_r, Q_r1, c["dbar0"], c["dbar1"]) < 1e-8


def test_assemble_Q_shape_check():
    with pytest.raises(ValueError):
        assemble_Q(np.eye(2), np.eye(3), np.eye(3), np.eye(3))


def test_discrete_op_json_round_trip(rng):
    A = rng.normal(size=(2, 3)) + 1j * rng.normal(size=(2, 3))
    op = DiscreteOp(A, rows=("a", "b"), cols=("x", "y", "z"), provenance={"source": "test"})
    back = DiscreteOp.from_json(op.to_json())
    assert np.array_equal(back.matrix, op.matrix)
    assert back.rows == op.rows and back.provenance == op.provenance


def test_discrete_op_is_read_only():
    op = DiscreteOp(np.eye(2))
    with pytest.raises(ValueError):
        op.matrix[0, 0] = 5
    with pytest.raises(ValueError):
        DiscreteOp(np.array([[np.nan]]))
