"""Finite-dimensional operator algebra for corrected homotopy operators.

Matrices stand in for the operators of the global construction: kernel
chains of ``A = I - H``, Neumann-series inverses under a contraction bound,
finite-rank corrections with least-squares dual functionals, and the final
assembly of the corrected pair ``(Q_r, Q_{r+1})``.

Operator norms are induced sup norms on coefficient vectors (maximum
absolute row sum), the same norm the tube quadrature reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ContractionViolated, RankDeficient, ThresholdAmbiguous

RANK_RTOL = 1e-8
NEUMANN_TOL = 1e-14


def sup_norm(A):
    """Induced sup norm ``max_i sum_j |A_ij|``."""
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(A), axis=-1)))


@dataclass(frozen=True)
class DiscreteOp:
    """Dense complex matrix with row/column descriptors and provenance.

    The matrix is stored read-only; algebra returns new objects.
    """

    matrix: np.ndarray
    rows: tuple = ()
    cols: tuple = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.array(self.matrix, dtype=complex)
        if a.ndim != 2:
            raise ValueError("operator matrix must be two-dimensional")
        if not np.all(np.isfinite(a)):
            raise ValueError("operator matrix has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "cols", tuple(self.cols))
        object.__setattr__(self, "provenance", dict(self.provenance))

    @classmethod
    def identity(cls, n, **prov):
        return cls(np.eye(n), provenance=prov)

    @property
    def shape(self):
        return self.matrix.shape

    def norm(self):
        return sup_norm(self.matrix)

    def __matmul__(self, other):
        other = _as_op(other)
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"shape mismatch {self.shape} @ {other.shape}")
        return DiscreteOp(self.matrix @ other.matrix, self.rows, other.cols)

    def __add__(self, other):
        other = _as_op(other)
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        return DiscreteOp(self.matrix + other.matrix, self.rows, self.cols)

    def __sub__(self, other):
        other = _as_op(other)
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} - {other.shape}")
        return DiscreteOp(self.matrix - other.matrix, self.rows, self.cols)

    def __call__(self, v):
        return self.matrix @ np.asarray(v)

    # ------------------------------------------------------------ JSON
    def to_dict(self):
        return {
            "real": self.matrix.real.tolist(),
            "imag": self.matrix.imag.tolist(),
            "rows": [list(r) if isinstance(r, tuple) else r for r in self.rows],
            "cols": [list(c) if isinstance(c, tuple) else c for c in self.cols],
            "provenance": self.provenance,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        re = np.asarray(d["real"], float)
        im = np.asarray(d.get("imag", np.zeros_like(re)), float)
        if re.ndim == 1 and re.size == 0:
            re = re.reshape(0, 0)
            im = im.reshape(0, 0)
        rows = tuple(tuple(r) if isinstance(r, list) else r for r in d.get("rows", ()))
        cols = tuple(tuple(c) if isinstance(c, list) else c for c in d.get("cols", ()))
        return cls(re + 1j * im, rows, cols, d.get("provenance", {}))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _as_op(x):
    return x if isinstance(x, DiscreteOp) else DiscreteOp(x)


def _mat(x):
    return x.matrix if isinstance(x, DiscreteOp) else np.asarray(x, dtype=complex)


# ---------------------------------------------------------------------------
# kernel chains


def null_dim(A, rtol=RANK_RTOL):
    """Dimension of the numerical kernel of ``A``.

    Singular values at most ``rtol * s_max`` count as zero; a singular value
    within a factor 10 of that threshold raises :class:`ThresholdAmbiguous`.
    """
    A = _mat(A)
    n = A.shape[1]
    s = linalg.svdvals(A)
    smax = s[0] if len(s) else 0.0
    if smax == 0.0:
        return n
    thr = rtol * smax
    near = (s > thr / 10) & (s < thr * 10)
    if np.any(near):
        raise ThresholdAmbiguous(
            f"singular value {s[near][0]:.3e} within 10x of threshold {thr:.3e}"
        )
    return int(n - np.count_nonzero(s > thr))


def kernel_chain(A, max_power=10, rtol=RANK_RTOL):
    """Dimensions of ``Ker(A^j)`` for ``j = 1..max_power``.

    Returns ``{"dims": [...], "stabilized_at": j}`` where ``j`` is the first
    power (1-based) with ``dims[j-1] == dims[j]``; ``None`` if the chain has
    not settled within ``max_power``.
    """
    A = _mat(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("kernel chains need a square operator")
    dims = []
    P = np.eye(A.shape[0], dtype=complex)
    for _ in range(max_power):
        P = P @ A
        dims.append(null_dim(P, rtol))
    stab = None
    for j in range(len(dims) - 1):
        if dims[j] == dims[j + 1]:
            stab = j + 1
            break
    return {"dims": dims, "stabilized_at": stab}


# ---------------------------------------------------------------------------
# Neumann inversion


def neumann_invert(F, C, tol=NEUMANN_TOL, gate=0.25, max_terms=100000):
    """Left inverse ``D = (sum_j (I - C F)^j) C`` of ``F``.

    The series is truncated once the sup norm of a term drops below ``tol``.
    Raises :class:`ContractionViolated` when ``|I - C F| >= gate``.
    """
    Fm, Cm = _mat(F), _mat(C)
    if Cm.shape[1] != Fm.shape[0] or Cm.shape[0] != Fm.shape[1]:
        raise ValueError(f"incompatible shapes C{Cm.shape} F{Fm.shape}")
    n = Fm.shape[1]
    T = np.eye(n) - Cm @ Fm
    q = sup_norm(T)
    if q >= gate:
        raise ContractionViolated(f"|I - CF| = {q:.6g} is not below {gate}", norm=q)
    S = np.eye(n, dtype=complex)
    term = np.eye(n, dtype=complex)
    terms = 1
    while terms < max_terms:
        term = term @ T
        if sup_norm(term) < tol:
            break
        S = S + term
        terms += 1
    D = S @ Cm
    prov = {
        "source": "neumann",
        "contraction": q,
        "terms": terms,
        "residual": sup_norm(D @ Fm - np.eye(n)),
        "norm_bound": sup_norm(Cm) / (1 - q),
    }
    return DiscreteOp(D, _rows(C), _cols(F), prov)


def _rows(x):
    return x.rows if isinstance(x, DiscreteOp) else ()


def _cols(x):
    return x.cols if isinstance(x, DiscreteOp) else ()


# ---------------------------------------------------------------------------
# finite-rank corrections


@dataclass(frozen=True)
class FiniteCorrection:
    """Correction data and the corrected operators.

    ``g`` (columns in degree ``r-1``) and ``f`` (columns in degree ``r``)
    are the correction bases; ``alpha`` and ``beta`` are the dual rows with
    ``alpha @ dbar0 @ g = I`` and ``beta @ dbar1 @ f = I``; ``alpha`` also
    annihilates ``f`` and the declared complement.
    """

    g: np.ndarray
    f: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    P_r: DiscreteOp
    P_r1: DiscreteOp
    F: DiscreteOp

    def biorthogonality(self, dbar0, dbar1):
        """Largest deviation of the two duality relations from identity."""
        d0, d1 = _mat(dbar0), _mat(dbar1)
        s, l = self.g.shape[1], self.f.shape[1]
        ea = np.abs(self.alpha @ d0 @ self.g - np.eye(s)).max() if s else 0.0
        eb = np.abs(self.beta @ d1 @ self.f - np.eye(l)).max() if l else 0.0
        return float(max(ea, eb))


def _duals(targets, annihilate, what):
    """Rows ``X`` with ``X @ targets = I`` and ``X @ annihilate = 0`` via the
    Moore-Penrose inverse of the stacked basis."""
    k = targets.shape[1]
    if k == 0:
        return np.zeros((0, targets.shape[0]), complex)
    stack = np.concatenate([targets, annihilate], axis=1) if annihilate.size else targets
    s = linalg.svdvals(stack)
    if s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficient(f"{what} basis is linearly dependent (sigma_min/sigma_max = {s[-1] / s[0]:.2e})")
    E = np.zeros((k, stack.shape[1]), complex)
    E[:, :k] = np.eye(k)
    return E @ linalg.pinv(stack)


def build_corrections(dbar0, dbar1, R_r, R_r1, g=None, f=None, complement=None):
    """Corrected operators from finite-rank data.

    Parameters
    ----------
    dbar0, dbar1 : matrices of the discrete dbar in degrees ``r-1 -> r`` and
        ``r -> r+1``.
    R_r, R_r1 : local homotopy operators ``r -> r-1`` and ``r+1 -> r``.
    g : columns in degree ``r-1``; ``dbar0 @ g`` are the exact vectors the
        ``alpha`` duals pick out.
    f : columns in degree ``r``; ``dbar1 @ f`` are picked out by ``beta``.
    complement : optional columns in degree ``r`` that ``alpha`` must also
        annihilate.

    Returns
    -------
    FiniteCorrection
        with ``P_r = R_r (I - f beta dbar1 - dbar0 g alpha) + g alpha``,
        ``P_r1 = R_r1 (I - dbar1 f beta) + f beta`` and
        ``F = dbar0 P_r + P_r1 dbar1``.
    """
    d0, d1 = _mat(dbar0), _mat(dbar1)
    Rr, Rr1 = _mat(R_r), _mat(R_r1)
    nr1, nr = d0.shape
    nr2 = d1.shape[0]
    if d1.shape[1] != nr1 or Rr.shape != (nr, nr1) or Rr1.shape != (nr1, nr2):
        raise ValueError(
            f"incompatible shapes dbar0{d0.shape} dbar1{d1.shape} R_r{Rr.shape} R_r1{Rr1.shape}"
        )
    g = np.zeros((nr, 0), complex) if g is None else np.asarray(g, complex).reshape(nr, -1)
    f = np.zeros((nr1, 0), complex) if f is None else np.asarray(f, complex).reshape(nr1, -1)
    comp = np.zeros((nr1, 0), complex) if complement is None else np.asarray(complement, complex).reshape(nr1, -1)
    exact = d0 @ g
    alpha = _duals(exact, np.concatenate([f, comp], axis=1), "exact")
    beta = _duals(d1 @ f, np.zeros((nr2, 0)), "f")
    I = np.eye(nr1)
    P_r = Rr @ (I - f @ beta @ d1 - exact @ alpha) + g @ alpha
    P_r1 = Rr1 @ (np.eye(nr2) - d1 @ f @ beta) + f @ beta
    F = d0 @ P_r + P_r1 @ d1
    out = FiniteCorrection(
        g, f, alpha, beta,
        DiscreteOp(P_r, provenance={"source": "P_r"}),
        DiscreteOp(P_r1, provenance={"source": "P_r1"}),
        DiscreteOp(F, provenance={"source": "F"}),
    )
    err = out.biorthogonality(d0, d1)
    if err > 1e-10:
        raise RankDeficient(f"dual functionals deviate from biorthogonality by {err:.2e}")
    return out


# ---------------------------------------------------------------------------
# final assembly


def assemble_Q(P_r, P_r1, dbar, D):
    """``Q_r = P_r D^2 dbar P_r`` and ``Q_{r+1} = D P_{r+1}``."""
    Pr, Pr1, d0, Dm = _mat(P_r), _mat(P_r1), _mat(dbar), _mat(D)
    n = d0.shape[0]
    if Pr.shape != d0.shape[::-1] or Dm.shape != (n, n) or Pr1.shape[0] != n:
        raise ValueError(
            f"incompatible shapes P_r{Pr.shape} P_r1{Pr1.shape} dbar{d0.shape} D{Dm.shape}"
        )
    Q_r = Pr @ Dm @ Dm @ d0 @ Pr
    Q_r1 = Dm @ Pr1
    return (
        DiscreteOp(Q_r, provenance={"source": "Q_r"}),
        DiscreteOp(Q_r1, provenance={"source": "Q_r1"}),
    )


def closed_basis(dbar1, rtol=RANK_RTOL):
    """Orthonormal columns spanning ``Ker(dbar1)``."""
    return linalg.null_space(_mat(dbar1), rcond=rtol)


def chain_residual(Q_r, Q_r1, dbar0, dbar1, subspace="closed"):
    """Sup norm of ``I - (dbar0 Q_r + Q_r1 dbar1)``.

    With ``subspace='closed'`` the operator is restricted to ``Ker(dbar1)``,
    the subspace on which the assembled pair is an exact homotopy; ``'full'``
    measures it on the whole space.
    """
    d0, d1 = _mat(dbar0), _mat(dbar1)
    n = d0.shape[0]
    E = np.eye(n) - (d0 @ _mat(Q_r) + _mat(Q_r1) @ d1)
    if subspace == "closed":
        Z = closed_basis(d1)
        if Z.shape[1] == 0:
            return 0.0
        E = E @ Z
    return sup_norm(E)


def toy_chain(perturb=0.0, seed=0):
    """Three-term chain on ``C^3`` with ``dbar0 = S^2`` and ``dbar1 = S``
    (``S`` the lower shift, so ``dbar1 dbar0 = 0``).

    ``P_r = e_0 e_2^T`` and ``P_r1 = S^T`` give ``F = dbar0 P_r + P_r1 dbar1
    = I``; ``perturb`` adds a random matrix of that sup norm to ``P_r1``.
    """
    S = np.diag(np.ones(2), -1).astype(complex)
    P_r = np.zeros((3, 3), complex)
    P_r[0, 2] = 1.0
    P_r1 = S.T.copy()
    if perturb:
        X = np.random.default_rng(seed).normal(size=(3, 3))
        P_r1 = P_r1 + perturb * X / sup_norm(X)
    return {"dbar0": S @ S, "dbar1": S, "P_r": P_r, "P_r1": P_r1}
