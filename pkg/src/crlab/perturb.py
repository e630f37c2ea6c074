"""Perturbations ``z -> z + f(z)`` of the ambient chart.

Near-identity map inversion by fixed-point iteration, refitting of graph
charts for perturbed defining functions, transport of forms between a
manifold and its perturbation, and the drift of the obstruction operator.

Norms ``|f|_{R,k}`` are discrete sup norms over a parameter lattice of the
real derivatives of order at most ``k``: a tensor lattice with ``per_dim``
points per real dimension when there are at most six dimensions, scrambled
Sobol points otherwise.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import gamma, pi
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import jet as J
from .errors import ConfigInvalid, ContractionViolated, NoConvergence
from .forms import MForm, dbar_M
from .geometry import DefiningSystem, fit_graph
from .jet import Jet
from .poly import Poly

LATTICE_PER_DIM = 9
SOBOL_POINTS = 4096


# ---------------------------------------------------------------------------
# evaluation lattices


def ball_lattice(dim, radius, per_dim=LATTICE_PER_DIM, center=None, seed=0, sobol_points=SOBOL_POINTS):
    """Points of the closed real ball of ``radius`` in ``R^dim``.

    Tensor lattice clipped to the ball (including the axis end points) for
    ``dim <= 6``; otherwise scrambled Sobol points mapped into the ball.
    """
    if dim <= 6:
        ax = np.linspace(-radius, radius, per_dim)
        u = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), -1).reshape(-1, dim)
        u = u[np.linalg.norm(u, axis=1) <= radius * (1 + 1e-12)]
    else:
        s = qmc.Sobol(d=dim + 1, scramble=True, seed=seed).random(sobol_points)
        from scipy.special import ndtri

        v = ndtri(np.clip(s[:, :dim], 1e-12, 1 - 1e-12))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        u = v * radius * s[:, dim:] ** (1.0 / dim)
        # the sphere itself carries the extreme values of most test maps
        u = np.concatenate([u, v * radius])
    if center is not None:
        u = u + center
    return u


def complex_points(u):
    n = u.shape[-1] // 2
    return u[..., :n] + 1j * u[..., n:]


def box_lattice(widths, per_dim=LATTICE_PER_DIM, seed=0, sobol_points=SOBOL_POINTS):
    """Points of the box ``prod [-w_i, w_i]``."""
    widths = np.asarray(widths, float)
    d = len(widths)
    if d <= 6:
        axes = [np.linspace(-w, w, per_dim) for w in widths]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    s = qmc.Sobol(d=d, scramble=True, seed=seed).random(sobol_points)
    return (2 * s - 1) * widths


# ---------------------------------------------------------------------------
# perturbation maps


def _real_derivative(p, j, n):
    """``d/dx_j`` (``j < n``) or ``d/dy_{j-n}`` of a polynomial."""
    if j < n:
        return p.d_zeta(j) + p.d_zetabar(j)
    k = j - n
    return (p.d_zeta(k) - p.d_zetabar(k)) * 1j


def _parse_component(n, spec, path):
    if isinstance(spec, list):
        return Poly.from_real_terms(n, spec)
    if isinstance(spec, dict):
        re = Poly.from_real_terms(n, spec.get("re", []))
        im = Poly.from_real_terms(n, spec.get("im", []))
        return re + im * 1j
    raise ConfigInvalid("component must be a term list or {re, im}", path)


class PerturbationMap:
    """Polynomial map ``f = (f_1..f_n)`` with ``F(z) = z + f(z)``.

    Components are complex polynomials in ``(zeta, zetabar)``; ``p`` is the
    smoothness budget (highest derivative order for which norms are taken).
    """

    def __init__(self, components, p=3, name="perturbation"):
        self.components = list(components)
        self.n = len(self.components)
        self.p = int(p)
        self.name = name
        self._norm_cache = {}

    # ------------------------------------------------------------ builders
    @classmethod
    def zero(cls, n):
        return cls([Poly(n) for _ in range(n)])

    @classmethod
    def constant(cls, c):
        c = np.asarray(c, complex)
        n = len(c)
        return cls([Poly.const(n, v) if v != 0 else Poly(n) for v in c])

    @classmethod
    def linear(cls, A):
        """``f(z) = A z`` (complex linear)."""
        A = np.asarray(A, complex)
        n = A.shape[0]
        comps = []
        for i in range(n):
            p = Poly(n)
            for j in range(n):
                if A[i, j] != 0:
                    p = p + Poly.var(n, j) * A[i, j]
            comps.append(p)
        return cls(comps)

    @classmethod
    def random(cls, n, rng, degree=3, terms=4, real=False):
        """Sparse random polynomial map; rescale with :meth:`normalized`."""
        comps = []
        for _ in range(n):
            t = {}
            for _ in range(terms):
                d = int(rng.integers(0, degree + 1))
                a = np.zeros(n, int)
                b = np.zeros(n, int)
                for _ in range(d):
                    if rng.uniform() < 0.5:
                        a[rng.integers(n)] += 1
                    else:
                        b[rng.integers(n)] += 1
                c = rng.normal() + (0 if real else 1j * rng.normal())
                key = (tuple(a), tuple(b))
                t[key] = t.get(key, 0) + c
            comps.append(Poly(n, t))
        return cls(comps)

    @classmethod
    def from_dict(cls, d):
        if "n" not in d or "components" not in d:
            raise ConfigInvalid("perturbation needs n and components", "perturbation")
        n = d["n"]
        comps = d["components"]
        if len(comps) != n:
            raise ConfigInvalid(f"expected {n} components", "perturbation.components")
        return cls(
            [_parse_component(n, c, f"perturbation.components[{i}]") for i, c in enumerate(comps)],
            p=d.get("p", 3),
            name=d.get("name", "perturbation"),
        )

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    # ------------------------------------------------------------ algebra
    def scaled(self, s):
        return PerturbationMap([c * s for c in self.components], self.p, self.name)

    def normalized(self, target, k=1, radius=1.0):
        """Copy rescaled so that ``|f|_{radius,k} = target``."""
        nrm = self.norm(k, radius)
        if nrm == 0:
            return self
        return self.scaled(target / nrm)

    def evaluate(self, z):
        z = np.asarray(z, complex)
        return np.stack([c.evaluate(z) * np.ones(z.shape[:-1]) for c in self.components], -1)

    def __call__(self, z):
        return self.evaluate(z)

    def forward(self, z):
        """``F(z) = z + f(z)``."""
        return np.asarray(z, complex) + self.evaluate(z)

    def norm(self, k=1, radius=1.0, per_dim=LATTICE_PER_DIM):
        """``|f|_{radius,k}``: max over components and real derivatives of
        order ``<= k`` of the sup over the lattice of the ball."""
        key = (k, radius, per_dim)
        if key in self._norm_cache:
            return self._norm_cache[key]
        n = self.n
        pts = complex_points(ball_lattice(2 * n, radius, per_dim))
        best = 0.0
        level = list(self.components)
        for order in range(k + 1):
            for p in level:
                if p.terms:
                    best = max(best, float(np.max(np.abs(p.evaluate(pts)))))
            if order < k:
                level = [_real_derivative(p, j, n) for p in level for j in range(2 * n)]
        self._norm_cache[key] = best
        return best

    def norms(self, radius=1.0, per_dim=LATTICE_PER_DIM):
        return [self.norm(k, radius, per_dim) for k in range(self.p + 1)]

    def compose_system(self, M0, name=None):
        """Defining functions ``rho_l(z) = rho0_l(z + f(z))`` of the
        perturbed manifold, on the chart of ``M0``."""
        n = self.n
        if n != M0.n:
            raise ValueError("dimension mismatch between perturbation and manifold")
        zs = [Poly.var(n, j) + self.components[j] for j in range(n)]
        zbs = [Poly.var(n, j, True) + self.components[j].conj() for j in range(n)]
        rho = []
        for p, s in zip(M0.rho, M0.scales):
            q = (p * (1.0 / s)).compose(zs, zbs)
            # exact arithmetic keeps q real; drop rounding in the imaginary parts
            q = (q + q.conj()) * 0.5
            rho.append(q)
        return DefiningSystem(
            n, M0.m, rho, center=M0.center, radius=M0.radius, floor=M0.floor,
            name=name or f"{M0.name}+{self.name}", scales=M0.scales,
        )


# ---------------------------------------------------------------------------
# inversion


@dataclass
class InversionReport:
    eps: float
    iterations: int
    increments: list
    envelope: list
    envelope_ok: bool
    residual: float
    g_sup: float
    radius: float


class InverseMap:
    """``G(z) = z + g(z)`` with ``g + f(z + g) = 0``, evaluated by the fixed
    point iteration ``g_{l+1} = -f(z + g_l)``."""

    def __init__(self, f, tol, max_iter=200):
        self.f = f
        self.tol = tol
        self.max_iter = max_iter
        self.report = None

    def iterate(self, z, envelope_eps=None):
        """Run the iteration at ``z``; return ``(g, increments)``."""
        z = np.asarray(z, complex)
        g = np.zeros_like(z)
        incs = []
        for _ in range(self.max_iter):
            g_new = -self.f.evaluate(z + g)
            inc = float(np.max(np.abs(g_new - g))) if g.size else 0.0
            g = g_new
            incs.append(inc)
            if inc <= self.tol * 0.01:
                break
            if len(incs) >= 3 and inc >= incs[-2] and inc > self.tol:
                raise NoConvergence(f"increments stopped shrinking at {inc:.3e}")
        else:
            raise NoConvergence(f"no convergence in {self.max_iter} iterations")
        return g, incs

    def evaluate(self, z):
        return self.iterate(z)[0]

    def __call__(self, z):
        return self.evaluate(z)

    def backward(self, z):
        """``G(z) = z + g(z)``."""
        return np.asarray(z, complex) + self.evaluate(z)


def invert_near_identity(f, tol=1e-13, points=None, per_dim=LATTICE_PER_DIM, max_iter=200):
    """Invert ``F = id + f`` on the ball of radius ``1 - 2 eps``.

    ``eps = |f|_{1,1}`` must be below ``1/(4n)``.  The iteration increments
    are checked against ``(2n)^l eps^(l+1)`` (increment ``l`` is
    ``sup |g_{l+1} - g_l|`` with ``g_0 = 0``).

    Returns
    -------
    InverseMap
        with ``report`` (an :class:`InversionReport`).
    """
    n = f.n
    eps = f.norm(1, 1.0, per_dim)
    if not eps < 1.0 / (4 * n):
        raise ContractionViolated(f"|f|_(1,1) = {eps:.4g} is not below 1/(4n) = {1 / (4 * n):.4g}", norm=eps)
    radius = 1.0 - 2 * eps
    if points is None:
        points = complex_points(ball_lattice(2 * n, radius, per_dim))
    G = InverseMap(f, tol, max_iter)
    g, incs = G.iterate(points)
    # iteration count: increments above the stopping level
    iters = sum(1 for v in incs if v > tol * 0.01)
    env = [(2 * n) ** l * eps ** (l + 1) for l in range(len(incs))]
    ok = all(v <= e * (1 + 1e-9) + 1e-15 for v, e in zip(incs, env))
    Gz = points + g
    resid = float(np.max(np.abs(Gz + f.evaluate(Gz) - points)))
    G.report = InversionReport(
        eps=eps, iterations=iters, increments=incs, envelope=env, envelope_ok=ok,
        residual=resid, g_sup=float(np.max(np.abs(g))), radius=radius,
    )
    return G


def inverse_after_forward(G, per_dim=LATTICE_PER_DIM):
    """``sup |G(F(z)) - z|`` on the ball of radius ``1 - 4 eps``."""
    f = G.f
    eps = G.report.eps
    pts = complex_points(ball_lattice(2 * f.n, 1.0 - 4 * eps, per_dim))
    return float(np.max(np.abs(G.backward(f.forward(pts)) - pts)))


# ---------------------------------------------------------------------------
# graph refit


def parameter_lattice(M, per_dim=LATTICE_PER_DIM, shrink=0.9, seed=0):
    """Graph parameters ``(Y, W)`` on a lattice of the chart box."""
    m, nW = M.m, M.n - M.m
    r = M.radius * shrink
    widths = [r] * m + [r / np.sqrt(2)] * (2 * nW)
    u = box_lattice(widths, per_dim, seed)
    Y = u[:, :m] + M.center[:m].imag
    W = u[:, m : m + nW] + 1j * u[:, m + nW :] + M.center[m:]
    return Y, W


def _param_jets(Y, W, order):
    """Jets of ``(Y, W, Wbar)`` seeded in every real parameter direction:
    the inner group for ``order >= 1``, both groups for ``order >= 2``."""
    m, nW = Y.shape[-1], W.shape[-1]
    d = m + 2 * nW
    N = len(Y)

    def seeds(dim, offset, scale):
        s = np.zeros((d, N, dim), complex)
        for a in range(dim):
            s[offset + a, :, a] = scale
        return s

    dY = seeds(m, 0, 1.0)
    dW = seeds(nW, m, 1.0) + seeds(nW, m + nW, 1j)
    dWb = seeds(nW, m, 1.0) + seeds(nW, m + nW, -1j)
    Yc = Y.astype(complex)
    if order >= 2:
        return (
            Jet.seed(Yc, d1=dY, d2=dY),
            Jet.seed(W, d1=dW, d2=dW),
            Jet.seed(np.conj(W), d1=dWb, d2=dWb),
        )
    return Jet.seed(Yc, d1=dY), Jet.seed(W, d1=dW), Jet.seed(np.conj(W), d1=dWb)


def jet_sup_norms(x, order):
    """``[sup|x|, sup|Dx|, sup|D^2 x|]`` up to ``order`` from a seeded jet."""
    c = x.c
    out = [float(np.max(np.abs(c[0, 0])))]
    if order >= 1:
        out.append(float(np.max(np.abs(c[1:, 0]))) if c.shape[0] > 1 else 0.0)
    if order >= 2:
        out.append(float(np.max(np.abs(c[1:, 1:]))) if c.shape[1] > 1 else 0.0)
    return out


def graph_delta(M0, g, k=1, per_dim=LATTICE_PER_DIM, M=None):
    """Discrete ``C^j`` norms (``j <= min(k, 2)``) of ``phi - phi0``.

    ``M`` (the perturbed system ``rho0(z + g(z))``) is built when omitted.
    """
    order = min(int(k), 2)
    M = g.compose_system(M0) if M is None else M
    ch0 = fit_graph(M0)
    ch = fit_graph(M)
    Y, W = parameter_lattice(M0, per_dim)
    Yj, Wj, Wbj = _param_jets(Y, W, order)
    if order == 0:
        d = ch.phi(Y, W) - ch0.phi(Y, W)
        norms = [float(np.max(np.abs(d)))]
    else:
        d = ch.phi(Yj, Wj, Wbj) - ch0.phi(Yj, Wj, Wbj)
        norms = jet_sup_norms(d, order)
    return {"delta_norms": norms, "g_norms": g.norms(), "points": len(Y)}


# ---------------------------------------------------------------------------
# transport of forms


def transport(h, chart):
    """``E``: the same coefficient functions of ``(Y, W)`` on another chart."""
    return MForm(chart, dict(h.terms))


def compare_dbar_transport(h, M, M0, per_dim=5):
    """Discrete ``C^1`` norm of ``dbar_M0 E(h) - E(dbar_M h)``.

    ``h`` is a tangential form on the chart of ``M``; both sides are
    evaluated at the same graph parameters.
    """
    ch, ch0 = fit_graph(M), fit_graph(M0)
    h = transport(h, ch)
    lhs = dbar_M(transport(h, ch0))
    rhs = dbar_M(h)
    Y, W = parameter_lattice(M0, per_dim)
    Yj, Wj, Wbj = (_swap(x) for x in _param_jets(Y, W, 1))
    a = lhs.evaluate(Yj, Wj, Wbj)
    b = rhs.evaluate(Yj, Wj, Wbj)
    best = [0.0, 0.0]
    for key in set(a) | set(b):
        d = J.as_jet(a.get(key, 0.0)) - J.as_jet(b.get(key, 0.0))
        best[0] = max(best[0], float(np.max(np.abs(d.c[0, 0]))))
        if d.c.shape[1] > 1:
            best[1] = max(best[1], float(np.max(np.abs(d.c[0, 1:]))))
    return {"c0": best[0], "c1": max(best), "points": len(Y)}


def _swap(x):
    return Jet(np.swapaxes(x.c, 0, 1))


# ---------------------------------------------------------------------------
# obstruction operator drift


def operator_drift(B0, B, forms, r, eps, spec, params):
    """``max |H_M0(E h) - H_M(h)|`` over the forms at shared parameters.

    ``B0`` and ``B`` are barriers of ``M0`` and ``M``; ``forms`` are
    tangential forms on the chart of ``M``; ``params`` is ``(Y, W)`` of the
    evaluation points (mapped onto each manifold by its own graph).
    """
    from .homotopy import local_H

    M0, M = B0.M, B.M
    ch0, ch = fit_graph(M0), fit_graph(M)
    Y, W = params
    z0 = ch0.point(Y, W)
    z = ch.point(Y, W)
    drift = 0.0
    sizes = []
    for h in forms:
        h = transport(h, ch)
        Hm = local_H(B, h, r, eps, spec, z)
        H0 = local_H(B0, transport(h, ch0), r, eps, spec, z0)
        for a, b in zip(H0, Hm):
            for key in set(a) | set(b):
                d = abs(complex(a.get(key, 0.0)) - complex(b.get(key, 0.0)))
                drift = max(drift, d)
            sizes.append(max([abs(complex(v)) for v in b.values()] + [0.0]))
    return {"drift": drift, "H_size": max(sizes + [0.0])}
