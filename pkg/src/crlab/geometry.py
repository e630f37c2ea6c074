"""Polynomial defining systems, graph charts, Levi-form analysis and tube grids."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import jet as J
from .errors import (
    ConfigInvalid,
    DegenerateChart,
    EigenvalueTie,
    EmptyGrid,
    NewtonDiverged,
    SamplingTooCoarse,
)
from .jet import Jet
from .poly import Poly, eval_matrix, eval_vector, hessian_holo, hessian_mixed


# ---------------------------------------------------------------------------
# defining systems


class DefiningSystem:
    """``m`` real polynomial defining functions on a chart of ``C^n``.

    Parameters
    ----------
    n, m : int
        Complex ambient dimension and real codimension.
    rho : list of Poly
        Real polynomials; ``scales[k]`` is already applied.
    center : array_like, optional
        Chart center in ``C^n``.
    radius : float
        Chart radius.
    floor : float
        Lower bound for the non-degeneracy determinant.
    """

    def __init__(self, n, m, rho, center=None, radius=0.5, floor=1e-3, name="manifold", scales=None):
        if not 1 <= m < n:
            raise ConfigInvalid(f"need 1 <= m < n, got n={n}, m={m}", "m")
        if len(rho) != m:
            raise ConfigInvalid(f"expected {m} defining functions, got {len(rho)}", "rho")
        for k, p in enumerate(rho):
            if not p.is_real():
                raise ConfigInvalid("defining function is not real", f"rho[{k}]")
        self.n, self.m = n, m
        self.scales = list(scales) if scales is not None else [1.0] * m
        self.rho = [p * s for p, s in zip(rho, self.scales)]
        self.center = np.zeros(n, complex) if center is None else np.asarray(center, complex)
        self.radius = float(radius)
        self.floor = float(floor)
        self.name = name
        self.grad = [p.gradient() for p in self.rho]
        self.grad_bar = [p.gradient_bar() for p in self.rho]
        self.hess_holo = [hessian_holo(p) for p in self.rho]
        self.hess_mixed = [hessian_mixed(p) for p in self.rho]
        self.rho2 = sum((p * p for p in self.rho[1:]), self.rho[0] * self.rho[0])
        self.rho2_holo = hessian_holo(self.rho2)
        self.rho2_mixed = hessian_mixed(self.rho2)
        self._graph = None

    # ------------------------------------------------------------ I/O
    @classmethod
    def from_dict(cls, d, name=None):
        for key in ("n", "m", "rho"):
            if key not in d:
                raise ConfigInvalid("missing field", key)
        n, m = d["n"], d["m"]
        if not isinstance(n, int) or not isinstance(m, int):
            raise ConfigInvalid("n and m must be integers", "n")
        if not isinstance(d["rho"], list):
            raise ConfigInvalid("rho must be a list of polynomials", "rho")
        polys = []
        for k, terms in enumerate(d["rho"]):
            if not isinstance(terms, list):
                raise ConfigInvalid("polynomial must be a list of terms", f"rho[{k}]")
            for i, t in enumerate(terms):
                if "coeff" not in t or "exponents" not in t:
                    raise ConfigInvalid("term needs coeff and exponents", f"rho[{k}][{i}]")
                if len(t["exponents"]) != 2 * n:
                    raise ConfigInvalid(f"exponents must have length {2 * n}", f"rho[{k}][{i}].exponents")
            polys.append(Poly.from_real_terms(n, terms))
        chart = d.get("chart", {})
        center = chart.get("center", [0.0] * n)
        if len(center) != n:
            raise ConfigInvalid(f"center must have {n} entries", "chart.center")
        center = [complex(c[0], c[1]) if isinstance(c, (list, tuple)) else complex(c) for c in center]
        scales = d.get("scales", [1.0] * m)
        if len(scales) != m or any(s <= 0 for s in scales):
            raise ConfigInvalid(f"scales must be {m} positive reals", "scales")
        return cls(
            n,
            m,
            polys,
            center=center,
            radius=float(chart.get("radius", 0.5)),
            floor=float(d.get("nondegeneracy_floor", 1e-3)),
            name=name or d.get("name", "manifold"),
            scales=scales,
        )

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"invalid JSON: {exc}", str(path)) from exc
        return cls.from_dict(d, name=d.get("name", path.stem))

    def to_dict(self):
        return {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "rho": [(p * (1.0 / s)).to_real_terms() for p, s in zip(self.rho, self.scales)],
            "chart": {"center": [[c.real, c.imag] for c in self.center], "radius": self.radius},
            "scales": self.scales,
        }

    # ------------------------------------------------------------ evaluation
    def rho_values(self, zeta, zetabar=None):
        """Values ``rho_k(zeta)``, last axis ``k``; real for arrays."""
        out = eval_vector(self.rho, zeta, zetabar)
        return out if isinstance(out, Jet) else out.real

    def rho_norm(self, zeta):
        return np.sqrt(np.sum(self.rho_values(zeta) ** 2, axis=-1))

    def jacobian(self, z, zbar=None):
        """Complex Jacobian ``[d rho_k / d zeta_j]`` with shape ``(..., m, n)``."""
        return eval_matrix(self.grad, z, zbar)

    def jacobian_bar(self, z, zbar=None):
        return eval_matrix(self.grad_bar, z, zbar)

    def real_gradients(self, z):
        """Real gradients in the coordinate order ``(x_1..x_n, y_1..y_n)``.

        Uses ``d/dx = 2 Re d/dzeta`` and ``d/dy = -2 Im d/dzeta``.
        """
        g = self.jacobian(z)
        return np.concatenate([2 * g.real, -2 * g.imag], axis=-1)

    def nondegeneracy(self, z):
        """``max_{|J|=m} |det(d rho_k/d zeta_J)|`` at each point."""
        g = self.jacobian(z)
        best = np.zeros(g.shape[:-2])
        for cols in itertools.combinations(range(self.n), self.m):
            best = np.maximum(best, np.abs(np.linalg.det(g[..., list(cols)])))
        return best

    def check_nondegeneracy(self, points):
        """Raise :class:`DegenerateChart` unless rank and floor hold at all
        points; return the minimal determinant."""
        points = np.atleast_2d(points)
        g = self.jacobian(points)
        s = np.linalg.svd(g, compute_uv=False)
        if np.any(s[..., -1] <= 1e-12 * np.maximum(s[..., 0], 1.0)):
            raise DegenerateChart("complex Jacobian has rank < m")
        d = self.nondegeneracy(points)
        if d.min() <= self.floor:
            raise DegenerateChart(f"non-degeneracy determinant {d.min():.3e} below floor {self.floor}")
        return float(d.min())

    # ------------------------------------------------------------ graph
    @property
    def graph(self):
        if self._graph is None:
            self._graph = fit_graph(self)
        return self._graph

    def sample_points(self, rng, count, radius=None):
        """Points of ``M`` from uniform graph parameters in a ball."""
        radius = self.radius if radius is None else radius
        d = 2 * self.n - self.m
        v = rng.normal(size=(count, d))
        v *= (rng.random(count) ** (1.0 / d) / np.linalg.norm(v, axis=1))[:, None] * radius
        Y = v[:, : self.m] + self.center[: self.m].imag
        W = v[:, self.m :: 2][:, : self.n - self.m] + 1j * v[:, self.m + 1 :: 2][:, : self.n - self.m]
        W = W + self.center[self.m :]
        return self.graph.point(Y, W)

    def sample_directions(self, rng, count):
        if self.m == 1:
            return np.where(rng.random((count, 1)) < 0.5, -1.0, 1.0)
        v = rng.normal(size=(count, self.m))
        return v / np.linalg.norm(v, axis=1, keepdims=True)


def load_bundled(name):
    """Load one of the bundled manifolds by name."""
    from importlib import resources

    path = resources.files("crlab") / "data" / f"{name}.json"
    d = json.loads(path.read_text())
    return DefiningSystem.from_dict(d, name=name)


BUNDLED = ("flat", "hyperquadric", "sig22", "codim2")


# ---------------------------------------------------------------------------
# Levi forms


def levi_form(rho, z):
    """Hermitian matrix ``[d^2 rho / d zeta_i d zetabar_j](z)``."""
    h = eval_matrix(hessian_mixed(rho), z)
    if isinstance(h, Jet):
        return h
    return h


def _form_matrix(h):
    """Matrix ``G`` with ``L(w) = sum H_ij w_i conj(w_j) = w^* G w``."""
    return np.swapaxes(h, -1, -2)


@dataclass
class LeviData:
    z: np.ndarray
    theta: np.ndarray
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    basis: np.ndarray
    E: np.ndarray = None
    a: np.ndarray = None

    @property
    def negative_count(self):
        return int(np.sum(self.eigenvalues < 0))


def _orthonormal_combination(M, z):
    """Matrix ``A`` with the real gradients of ``A @ rho`` orthonormal at
    ``z`` (modified Gram-Schmidt)."""
    g = M.real_gradients(z)
    m = M.m
    A = np.eye(m)
    vecs = [g[k].copy() for k in range(m)]
    for k in range(m):
        for j in range(k):
            c = vecs[k] @ vecs[j]
            vecs[k] = vecs[k] - c * vecs[j]
            A[k] -= c * A[j]
        nrm = np.linalg.norm(vecs[k])
        if nrm < 1e-14:
            raise DegenerateChart("gradients of the defining functions are dependent")
        vecs[k] /= nrm
        A[k] /= nrm
    return A


def complex_tangent_basis(M, z):
    """Orthonormal basis (columns) of ``T^c_z = ker [d rho_k / d zeta_j]``."""
    g = M.jacobian(z)
    u, s, vh = np.linalg.svd(g)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateChart("complex Jacobian has rank < m")
    # w in T^c iff g @ w = 0
    return vh[M.m :].conj().T


def directional_levi(M, theta, z):
    """Directional Levi form ``-L_z rho_theta`` restricted to ``T^c_z``.

    Gradients are orthonormalized at ``z`` first.  Eigenvalues are returned
    in ascending order and eigenvectors as columns in ``C^n`` coordinates.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    z = np.asarray(z, complex)
    A = _orthonormal_combination(M, z)
    coef = theta @ A
    H = sum(c * levi_form(p, z) for c, p in zip(coef, M.rho))
    G = -_form_matrix(H)
    B = complex_tangent_basis(M, z)
    R = B.conj().T @ G @ B
    R = 0.5 * (R + R.conj().T)
    w, v = np.linalg.eigh(R)
    return LeviData(z=z, theta=theta, matrix=R, eigenvalues=w, eigenvectors=B @ v, basis=B)


@dataclass
class Certificate:
    q: int
    q_attained: int
    margin: float
    passed: bool
    counts: list = field(default_factory=list)


def default_samples(M, count=64, seed=0):
    """A ``(theta, z)`` grid: directions x chart points.

    Returns ``thetas`` (T, m) and ``points`` (Z, n).  For ``m = 1`` the
    directions are ``+-1``; otherwise equally spaced (m=2) or QMC points.
    """
    rng = np.random.default_rng(seed)
    if M.m == 1:
        thetas = np.array([[1.0], [-1.0]])
    elif M.m == 2:
        a = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        thetas = np.stack([np.cos(a), np.sin(a)], axis=1)
    else:
        thetas = M.sample_directions(rng, 16)
    zc = max(count // len(thetas), 1)
    points = M.sample_points(rng, zc, radius=0.5 * M.radius)
    # order points along a path so neighbours are close
    order = [0]
    left = set(range(1, len(points)))
    while left:
        last = points[order[-1]]
        j = min(left, key=lambda i: np.linalg.norm(points[i] - last))
        order.append(j)
        left.remove(j)
    return thetas, points[order]


def certify_q_pseudoconcave(M, q, samples=None, tie_tol=1e-10):
    """Certify that every sampled directional Levi form has ``>= q``
    negative eigenvalues.

    Samples are a ``(thetas, points)`` grid.  Adjacent samples are
    consecutive points for a fixed direction and, when ``m > 1``, consecutive
    directions for a fixed point.  A change of the negative count between
    adjacent samples means an eigenvalue crossed zero in between and raises
    :class:`SamplingTooCoarse`.
    """
    thetas, points = samples if samples is not None else default_samples(M)
    if len(thetas) == 0 or len(points) == 0:
        raise EmptyGrid("empty sample set")
    counts = np.zeros((len(thetas), len(points)), int)
    qth = np.full((len(thetas), len(points)), np.inf)
    for i, th in enumerate(thetas):
        for j, z in enumerate(points):
            ev = directional_levi(M, th, z).eigenvalues
            neg = ev[ev < -tie_tol]
            counts[i, j] = len(neg)
            qth[i, j] = abs(neg[q - 1]) if q >= 1 and len(neg) >= q else (np.inf if q < 1 else 0.0)
    if np.any(np.diff(counts, axis=1) != 0):
        raise SamplingTooCoarse("negative-eigenvalue count changes between adjacent chart samples")
    if M.m > 1 and np.any(np.diff(counts, axis=0) != 0):
        raise SamplingTooCoarse("negative-eigenvalue count changes between adjacent directions")
    q_att = int(counts.min())
    margin = float(qth.min()) if q >= 1 else float("inf")
    return Certificate(q=q, q_attained=q_att, margin=margin, passed=bool(q_att >= q and margin > 0), counts=counts.tolist())


@dataclass
class Subspaces:
    E: np.ndarray
    a: np.ndarray
    eigenvalues: np.ndarray
    negativity: float
    positivity: float


def barrier_matrix(M, theta, z):
    """Hermitian matrix of ``-L_z rho_theta - L_z rho^2`` on ``C^n`` (form
    convention ``w^* G w``)."""
    theta = np.atleast_1d(np.asarray(theta, float))
    H = sum(t * eval_matrix(h, z) for t, h in zip(theta, M.hess_mixed))
    H2 = eval_matrix(M.rho2_mixed, z)
    G = -_form_matrix(H + H2)
    return 0.5 * (G + np.conj(np.swapaxes(G, -1, -2)))


def negative_subspaces(M, theta, z, q, tie_tol=1e-9):
    """Split ``C^n`` into ``E_{q+m}`` (most negative eigenvectors of
    ``-L rho_theta - L rho^2``) and its orthonormal complement.

    Returns :class:`Subspaces` with ``a[j] = conj(u_j)`` for complement
    eigenvectors ``u_j`` so that ``A_j(w) = sum_i a_ji w_i = u_j^* w``.
    """
    n, k = M.n, q + M.m
    if not 0 < k <= n:
        raise ValueError("q + m must lie in 1..n")
    G = barrier_matrix(M, theta, z)
    w, v = np.linalg.eigh(G)
    scale = max(1.0, np.abs(w).max())
    if k < n and abs(w[k] - w[k - 1]) < tie_tol * scale:
        raise EigenvalueTie(f"eigenvalues {w[k - 1]:.3e} and {w[k]:.3e} tie at the cut")
    E = v[:, :k]
    U = v[:, k:]
    Pi = U @ U.conj().T
    # positivity of (L rho_theta + L rho^2)/2 + A  ==  -G/2 + Pi
    pos = np.linalg.eigvalsh(-0.5 * G + Pi).min()
    return Subspaces(E=E, a=U.conj().T, eigenvalues=w, negativity=float(w[k - 1]), positivity=float(pos))


# ---------------------------------------------------------------------------
# graph charts


class ChartGraph:
    """``M`` as a graph ``X = phi(Y, W)`` over ``Y in R^m``, ``W in C^{n-m}``.

    Points are ``(phi(Y, W) + i Y, W)``.
    """

    def __init__(self, system, y_radius, w_radius, tol=1e-12, max_iter=50):
        self.system = system
        self.n, self.m = system.n, system.m
        self.y_radius = y_radius
        self.w_radius = w_radius
        self.tol = tol
        self.max_iter = max_iter
        self.residual = None

    def _assemble(self, X, Y, W):
        m = self.m
        if isinstance(X, Jet) or isinstance(Y, Jet) or isinstance(W, Jet):
            first = J.as_jet(X) + J.as_jet(Y) * 1j
            return J.stack([first[..., k] for k in range(m)] + [J.as_jet(W)[..., k] for k in range(self.n - m)], axis=-1)
        return np.concatenate([X + 1j * Y, W], axis=-1)

    def phi(self, Y, W, Wbar=None, x0=None):
        """Solve ``rho(X + iY, W) = 0`` for ``X`` by Newton's method.

        Works on arrays and on jets; with jets ``Wbar`` must be supplied as an
        independent jet.
        """
        sysm, m = self.system, self.m
        is_jet = isinstance(Y, Jet) or isinstance(W, Jet)
        Yv = J.value(Y).real if not is_jet else np.real(J.value(Y))
        Wv = J.value(W)
        X = np.zeros(np.shape(Yv)) if x0 is None else np.array(x0, float)
        X = X + sysm.center[:m].real
        for it in range(self.max_iter):
            z = np.concatenate([X + 1j * Yv, Wv], axis=-1)
            r = sysm.rho_values(z)
            Jm = 2 * sysm.jacobian(z)[..., :m].real
            step = np.linalg.solve(Jm, r[..., None])[..., 0]
            X = X - step
            if not np.all(np.isfinite(X)):
                raise NewtonDiverged("graph Newton iteration produced non-finite values")
            if np.max(np.abs(step), initial=0.0) < self.tol:
                break
        else:
            raise NewtonDiverged("graph Newton iteration did not converge")
        if not is_jet:
            return X
        # jet refinement: a few Newton steps in jet arithmetic
        Yj, Wj = J.as_jet(Y), J.as_jet(W)
        Wbj = J.as_jet(Wbar) if Wbar is not None else Jet(np.conj(Wj.c))
        Xj = J.as_jet(X.astype(complex))
        for _ in range(4):
            zj = self._assemble(Xj, Yj, Wj)
            zbj = J.stack(
                [(Xj - Yj * 1j)[..., k] for k in range(m)] + [Wbj[..., k] for k in range(self.n - m)], axis=-1
            )
            r = sysm.rho_values(zj, zbj)
            g = sysm.jacobian(zj, zbj)
            gb = sysm.jacobian_bar(zj, zbj)
            Jm = (g + gb)[..., :m]
            Xj = Xj - (Jm.inv() @ r.expand(-1))[..., 0]
        return Xj

    def point(self, Y, W):
        Y = np.asarray(Y, float)
        W = np.asarray(W, complex)
        X = self.phi(Y, W)
        return np.concatenate([X + 1j * Y, W], axis=-1)

    def params(self, z):
        """Graph parameters ``(Y, W)`` of a point."""
        z = np.asarray(z, complex)
        return z[..., : self.m].imag, z[..., self.m :]


def fit_graph(M, y_radius=None, w_radius=None, samples=7, tol=1e-12):
    """Fit the graph chart of ``M`` and verify it on a parameter lattice.

    Raises :class:`NewtonDiverged` when Newton fails or the fitted residual
    exceeds ``tol`` somewhere on the lattice.
    """
    y_radius = M.radius if y_radius is None else y_radius
    w_radius = M.radius if w_radius is None else w_radius
    g = ChartGraph(M, y_radius, w_radius, tol=tol)
    d = 2 * M.n - M.m
    rng = np.random.default_rng(12345)
    if d <= 3:
        axes = [np.linspace(-1, 1, samples)] * d
        u = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    else:
        u = rng.uniform(-1, 1, size=(samples**3, d))
    Y = u[:, : M.m] * y_radius + M.center[: M.m].imag
    W = (u[:, M.m :: 2] + 1j * u[:, M.m + 1 :: 2]) * w_radius / np.sqrt(2) + M.center[M.m :]
    pts = g.point(Y, W)
    res = np.abs(M.rho_values(pts)).max()
    if not res < 100 * tol:
        raise NewtonDiverged(f"graph residual {res:.2e} exceeds tolerance")
    g.residual = float(res)
    return g


# ---------------------------------------------------------------------------
# tube grids


@dataclass
class TubeGrid:
    """Quadrature on ``U(eps) = {rho = eps}``.

    ``zeta`` (N, n) nodes, ``weights`` (N,) surface-measure weights,
    ``normal`` (N, 2n) area-weighted outward normal covectors in the order
    ``(x_1, y_1, ..., x_n, y_n)``, ``theta`` (N, m) directions and the
    parameter weights ``dparam`` (N,).
    """

    eps: float
    zeta: np.ndarray
    weights: np.ndarray
    normal: np.ndarray
    theta: np.ndarray
    params: np.ndarray
    dparam: np.ndarray
    t_nodes: np.ndarray
    t_weights: np.ndarray
    scheme: str

    @property
    def count(self):
        return len(self.weights)


def gauss_legendre(order, a=0.0, b=1.0):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def sphere_points(dim, count, seed=0):
    """Points on ``S^{dim-1}`` (from scrambled Sobol Gaussians) with equal
    weights summing to the sphere area.  Antithetic pairs are included."""
    from math import gamma, pi

    half = max(count // 2, 1)
    eng = qmc.Sobol(d=dim, scramble=True, seed=seed)
    u = eng.random(half)
    from scipy.special import ndtri

    v = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v = np.concatenate([v, -v])
    area = 2 * pi ** (dim / 2) / gamma(dim / 2)
    return v, np.full(len(v), area / len(v))


def complex_sphere_rule(k, n_phase, n_simplex):
    """Product rule on the unit sphere of ``C^k`` (as ``S^{2k-1}`` in
    ``R^{2k}`` with coordinates ``[Re w, Im w]``).

    For the uniform measure the squared moduli ``|w_j|^2`` are uniform on the
    simplex and the phases are independent and uniform, so the rule is a
    trapezoid rule in each phase times a collapsed Gauss-Jacobi rule on the
    simplex.  Weights sum to the sphere area.
    """
    from math import factorial, gamma, pi

    from scipy.special import roots_jacobi

    phi = 2 * pi * np.arange(n_phase) / n_phase
    grids = np.meshgrid(*([phi] * k), indexing="ij")
    phases = np.stack([g.reshape(-1) for g in grids], -1)  # (P^k, k)
    # collapsed coordinates on the (k-1)-simplex
    s = np.ones((1, 1))
    w = np.ones(1)
    rest = np.ones(1)
    cols = []
    for i in range(k - 1):
        a = k - 2 - i
        x, wx = roots_jacobi(n_simplex, a, 0)
        u = (x + 1) / 2
        wu = wx / 2 ** (a + 1)
        cols = [c[:, None] * np.ones(n_simplex) for c in cols]
        cols.append(rest[:, None] * u[None, :])
        w = (w[:, None] * wu[None, :]).reshape(-1)
        rest = (rest[:, None] * (1 - u)[None, :]).reshape(-1)
        cols = [c.reshape(-1) for c in cols]
    cols.append(rest)
    s = np.stack(cols, -1)  # (Q^(k-1), k)
    mod = np.sqrt(np.clip(s, 0, None))
    wc = mod[:, None, :] * np.exp(1j * phases)[None, :, :]
    wc = wc.reshape(-1, k)
    area = 2 * pi**k / gamma(k)
    wt = np.repeat(w * factorial(k - 1), len(phases)) / len(phases) * area
    return np.concatenate([wc.real, wc.imag], -1), wt


def _tube_point(M, base, theta, eps):
    """Move ``base`` on ``M`` inside the span of the gradients until
    ``rho_k = -theta_k eps``; vectorized Newton on the span coefficients."""
    m = M.m
    g = M.real_gradients(base)  # (N, m, 2n)
    s = np.zeros(base.shape[:-1] + (m,))
    target = -theta * eps

    def to_complex(v):
        return v[..., : M.n] + 1j * v[..., M.n :]

    for _ in range(60):
        z = base + to_complex(np.einsum("...k,...kd->...d", s, g))
        r = M.rho_values(z) - target
        gz = M.real_gradients(z)
        Jm = np.einsum("...ld,...kd->...lk", gz, g)
        step = np.linalg.solve(Jm, r[..., None])[..., 0]
        s = s - step
        if not np.all(np.isfinite(s)):
            raise NewtonDiverged("tube Newton iteration diverged")
        if np.abs(step).max() < 1e-15:
            break
    z = base + to_complex(np.einsum("...k,...kd->...d", s, g))
    if np.abs(M.rho_values(z) - target).max() > 1e-11:
        raise NewtonDiverged("tube Newton iteration did not reach the level set")
    return z


def tube_grid(M, eps, resolution, box=None, t_order=8, seed=0, scheme=None):
    """Quadrature nodes on ``U(eps)`` over a parameter box.

    Parameters ``(theta, Y, W)``; ``Y`` and ``W`` range over a box of
    half-width ``box`` around the chart center.  Product Gauss-Legendre is
    used when ``dim U(eps) <= 5``, scrambled Sobol otherwise.  Surface
    weights come from the Gram determinant of the parametrization.
    """
    if resolution <= 0:
        raise EmptyGrid("resolution must be positive")
    n, m = M.n, M.m
    box = M.radius * 0.5 if box is None else box
    dp = 2 * n - m  # graph parameters
    dim = 2 * n - 1
    scheme = scheme or ("product-gauss" if dim <= 5 else "monte-carlo")
    if scheme == "product-gauss":
        x, w = gauss_legendre(resolution, -box, box)
        grids = np.meshgrid(*([x] * dp), indexing="ij")
        u = np.stack([gg.ravel() for gg in grids], -1)
        wu = np.prod(np.stack(np.meshgrid(*([w] * dp), indexing="ij"), -1).reshape(-1, dp), axis=1)
    else:
        cnt = resolution ** min(dp, 3)
        u = qmc.Sobol(d=dp, scramble=True, seed=seed).random(cnt) * 2 * box - box
        wu = np.full(len(u), (2 * box) ** dp / len(u))
    # directions
    if m == 1:
        thetas, wt = np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    elif m == 2:
        a = np.linspace(0, 2 * np.pi, max(resolution, 4), endpoint=False)
        thetas = np.stack([np.cos(a), np.sin(a)], 1)
        wt = np.full(len(a), 2 * np.pi / len(a))
    else:
        thetas, wt = sphere_points(m, resolution * 4, seed)
    c = M.center
    Y = u[:, :m] + c[:m].imag
    W = u[:, m::2] + 1j * u[:, m + 1 :: 2] + c[m:]
    base = M.graph.point(Y, W)
    zs, ws, ns, ts, ps, dps = [], [], [], [], [], []
    h = 1e-6
    for th, wth in zip(thetas, wt):
        thb = np.broadcast_to(th, (len(u), m))
        z = _tube_point(M, base, thb, eps)
        # tangent vectors by central differences of the parametrization
        tang = []
        for k in range(dp):
            du = np.zeros(dp)
            du[k] = h
            zp = _tube_point(M, M.graph.point(Y + du[:m], W + du[m::2] + 1j * du[m + 1 :: 2]), thb, eps)
            zm = _tube_point(M, M.graph.point(Y - du[:m], W - du[m::2] - 1j * du[m + 1 :: 2]), thb, eps)
            tang.append((zp - zm) / (2 * h))
        if m > 1:
            # theta directions: derivative along the circle/sphere tangent
            basis = _sphere_tangent(th)
            for e in basis:
                zp = _tube_point(M, base, thb + h * e, eps)
                zm = _tube_point(M, base, thb - h * e, eps)
                tang.append((zp - zm) / (2 * h))
        T = np.stack([_interleave(t) for t in tang], axis=1)  # (N, 2n-1, 2n)
        N = _cofactor_normal(T)
        # orient outward: N(grad |rho|) > 0, grad|rho| = sum_k rho_k grad rho_k / |rho|
        rv = M.rho_values(z)
        grad = np.einsum("nk,nkd->nd", rv, M.real_gradients(z)) / eps
        gint = _interleave_real(grad, n)
        sgn = np.sign(np.einsum("nd,nd->n", N, gint))
        N = N * sgn[:, None]
        gram = np.linalg.det(np.einsum("nad,nbd->nab", T, T))
        zs.append(z)
        ws.append(np.sqrt(np.abs(gram)) * wu * wth)
        ns.append(N * (wu * wth)[:, None])
        ts.append(thb)
        ps.append(u)
        dps.append(wu * wth)
    tn, tw = gauss_legendre(t_order)
    return TubeGrid(
        eps=eps,
        zeta=np.concatenate(zs),
        weights=np.concatenate(ws),
        normal=np.concatenate(ns),
        theta=np.concatenate(ts),
        params=np.concatenate(ps),
        dparam=np.concatenate(dps),
        t_nodes=tn,
        t_weights=tw,
        scheme=scheme,
    )


def _sphere_tangent(th):
    m = len(th)
    q, _ = np.linalg.qr(np.concatenate([th[:, None], np.eye(m)], axis=1))
    return [q[:, k] for k in range(1, m)]


def _interleave(zv):
    """Complex vectors (..., n) to real (..., 2n) in order x1,y1,x2,y2,..."""
    out = np.empty(zv.shape[:-1] + (2 * zv.shape[-1],))
    out[..., 0::2] = zv.real
    out[..., 1::2] = zv.imag
    return out


def _interleave_real(g, n):
    """Real gradient in order (x..., y...) to interleaved order."""
    out = np.empty_like(g)
    out[..., 0::2] = g[..., :n]
    out[..., 1::2] = g[..., n:]
    return out


def _cofactor_normal(T):
    """Covector ``N`` with ``N(v) = det[v, T_1, ..., T_{d-1}]``."""
    d = T.shape[-1]
    Mx = np.concatenate([np.zeros(T.shape[:-2] + (1, d)), T], axis=-2)
    N = np.empty(T.shape[:-2] + (d,))
    for i in range(d):
        Mi = Mx.copy()
        Mi[..., 0, i] = 1.0
        N[..., i] = np.linalg.det(np.swapaxes(Mi, -1, -2))
    return N


# ---------------------------------------------------------------------------
# atlas covers


def _smooth_step(u):
    """``1`` for ``u <= 0``, ``0`` for ``u >= 1``; C-infinity in between.
    Works on arrays and jets (real argument)."""
    uv = np.real(J.value(u))
    inside = (uv > 0) & (uv < 1)
    uc = np.clip(uv, 1e-3, 1 - 1e-3)
    if isinstance(u, Jet):
        c = u.c.copy()
        c[0, 0] = uc
        uu = Jet(c)
        a = (-(uu.reciprocal())).exp()
        b = (-((1 - uu).reciprocal())).exp()
        s = b / (a + b)
        out = s.c.copy()
        out[:, :, ~inside] = 0.0
        out[0, 0][uv <= 0] = 1.0
        return Jet(out)
    a = np.exp(-1.0 / uc)
    b = np.exp(-1.0 / (1 - uc))
    return np.where(uv <= 0, 1.0, np.where(uv >= 1, 0.0, b / (a + b)))


class AtlasCover:
    """Charts ``(center_i, radius_i)`` on ``M`` with a partition of unity.

    ``theta_i = beta_i / sum_j beta_j`` with ``beta_i = step(|z-c_i|/r_i)``
    and ``theta'_i = 1`` on the ball of radius ``r_i``, ``0`` beyond
    ``expand * r_i``.  ``beta_i`` is ``1`` on the ball of radius ``inner*r_i``.
    """

    def __init__(self, centers, radii, expand=1.5, inner=0.5):
        self.centers = [np.asarray(c, complex) for c in centers]
        self.radii = list(radii)
        self.expand = expand
        self.inner = inner

    def _dist(self, z, zbar, i):
        c = self.centers[i]
        if isinstance(z, Jet):
            d = z - c
            db = zbar - np.conj(c)
            s = (d * db).sum(-1)
            return s.sqrt()
        return np.linalg.norm(np.asarray(z) - c, axis=-1)

    def beta(self, i, z, zbar=None):
        r = self.radii[i]
        u = (self._dist(z, zbar, i) / r - self.inner) / (1 - self.inner)
        return _smooth_step(u)

    def theta(self, i, z, zbar=None):
        tot = None
        for j in range(len(self.centers)):
            b = self.beta(j, z, zbar)
            tot = b if tot is None else tot + b
        tv = np.real(J.value(tot))
        if np.any(tv <= 0):
            raise_cover = np.where(tv <= 0)[0]
            from .errors import CoverMismatch

            raise CoverMismatch(f"points {raise_cover[:5]} not covered by any chart")
        return self.beta(i, z, zbar) / tot

    def theta_prime(self, i, z, zbar=None):
        r = self.radii[i]
        u = (self._dist(z, zbar, i) / r - 1.0) / (self.expand - 1.0)
        return _smooth_step(u)

    def validate(self, points, tol=1e-12):
        from .errors import CoverMismatch

        s = sum(np.real(self.theta(i, points)) for i in range(len(self.centers)))
        if np.abs(s - 1).max() > tol:
            raise CoverMismatch(f"partition of unity off by {np.abs(s - 1).max():.2e}")
        for i in range(len(self.centers)):
            inside = np.real(self.theta(i, points)) > 0
            if np.any(np.abs(np.real(self.theta_prime(i, points[inside])) - 1) > tol):
                raise CoverMismatch("theta' is not identically 1 on supp(theta)")
        return True


class ExplicitCover:
    """Cover given directly by partition functions (used to test gating)."""

    def __init__(self, thetas, thetas_prime):
        self.thetas = thetas
        self.thetas_prime = thetas_prime
        self.centers = list(range(len(thetas)))

    def theta(self, i, z, zbar=None):
        return self.thetas[i](z, zbar)

    def theta_prime(self, i, z, zbar=None):
        return self.thetas_prime[i](z, zbar)

    def validate(self, points, tol=1e-12):
        from .errors import CoverMismatch

        s = sum(np.real(J.value(self.theta(i, points))) for i in range(len(self.thetas)))
        if np.abs(s - 1).max() > tol:
            raise CoverMismatch(f"partition of unity off by {np.abs(s - 1).max():.2e}")
        return True
