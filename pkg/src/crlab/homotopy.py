"""Local and global homotopy operators by quadrature over tubes around M.

The kernels are integrated over the two sheets ``rho = +-eps`` of a tube
around a hypersurface chart (``m = 1``).  For every output point ``z`` the
grid is centered at ``z``: the characteristic coordinate is sampled on the
scale ``eps`` around the ridge where the linear part of the barrier has
vanishing imaginary part, and the complex-tangential radius on the scale
``sqrt(eps)``.  Tangential derivatives of outputs are taken by forward jets
in ``zbar`` with the nodes held fixed.
"""

from __future__ import annotations

import itertools
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import factorial, pi

import numpy as np

from . import jet as J
from .errors import DegreeOutOfRange, EmptyGrid, SamplingTooCoarse
from .forms import MForm, cr_frame, dbar_M, project_tangential
from .geometry import complex_sphere_rule, gauss_legendre, sphere_points
from .jet import Jet
from .kernels import batched_det, det_jet


def kappa(n):
    """``(dzetabar_[j] ^ omega(zeta))(tau) = (-1)^(j-1) kappa N_j`` for a
    frame ``tau`` positive for the outward normal, ``N_j = (N_xj + i N_yj)/2``."""
    return (-1) ** (n * (n - 1) // 2) * (2j) ** n


def orientation(n):
    """Orientation sign of all integration domains.

    Fixed by requiring the Bochner-Martinelli integral of ``f = 1`` over a
    sphere to return ``+1``; with the boundary orientation this sign is
    ``(-1)^(n(n-1)/2)``.
    """
    return (-1) ** (n * (n - 1) // 2)


def prefactor(n, r):
    return factorial(n - 1) / (2j * pi) ** n


def threads():
    try:
        return max(1, int(os.environ.get("CRLAB_THREADS", "1")))
    except ValueError:
        return 1


def _perm_sign(seq):
    """Sign of the permutation sorting ``seq`` (distinct entries)."""
    s = 1
    seq = list(seq)
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                s = -s
    return s


# ---------------------------------------------------------------------------
# Bochner-Martinelli reproduction on a sphere


def sphere_quadrature(n, radius, N, seed=0):
    """Nodes and area weights on the sphere ``|zeta| = radius``.

    For ``n = 2`` a product rule in Hopf coordinates
    ``zeta = R (sqrt(1-s) e^{i b}, sqrt(s) e^{i c})`` (midpoint in ``s``,
    trapezoid in the angles, about ``N^(1/3)`` points each); otherwise
    equal-weight quasi-random points.
    """
    if n == 2:
        k = max(2, int(round(N ** (1.0 / 3.0))))
        s = (np.arange(k) + 0.5) / k
        a = 2 * pi * np.arange(k) / k
        S, Bt, C = np.meshgrid(s, a, a, indexing="ij")
        zeta = radius * np.stack([np.sqrt(1 - S) * np.exp(1j * Bt), np.sqrt(S) * np.exp(1j * C)], -1).reshape(-1, 2)
        w = np.full(len(zeta), 0.5 * radius**3 * (1.0 / k) * (2 * pi / k) ** 2)
        return zeta, w
    pts, w = sphere_points(2 * n, N, seed)
    zeta = radius * (pts[:, :n] + 1j * pts[:, n:])
    return zeta, w * radius ** (2 * n - 1)


def bm_coefficients(zeta, z):
    """Coefficients ``c_j`` of the Bochner-Martinelli form on
    ``dzetabar_[j]`` (``z`` fixed): ``det[b, D b`` without column ``j]``."""
    w = zeta - z
    wb = np.conj(w)
    n2 = np.sum(w * wb, axis=-1).real
    n = zeta.shape[-1]
    b = wb / n2[:, None]
    Db = np.eye(n)[None] / n2[:, None, None] - wb[:, :, None] * w[:, None, :] / (n2**2)[:, None, None]
    out = np.empty(zeta.shape, complex)
    for j in range(n):
        cols = [l for l in range(n) if l != j]
        Mt = np.concatenate([b[:, :, None], Db[:, :, cols]], axis=2)
        out[:, j] = batched_det(Mt)
    return out


def bm_reproduce(f, radius, z, N, n=None, seed=0):
    """``(n-1)!/(2 pi i)^n int_{|zeta|=R} f omega'(b) ^ omega(zeta)``.

    ``f`` is a callable on arrays (..., n) or a :class:`~crlab.poly.Poly`.
    The sphere carries the boundary orientation of the ball (outward
    normal first).
    """
    z = np.asarray(z, complex)
    n = n or z.shape[-1]
    if np.linalg.norm(z) >= radius:
        raise ValueError("z must lie inside the sphere")
    zeta, w = sphere_quadrature(n, radius, N, seed)
    c = bm_coefficients(zeta, z)
    nu = zeta / radius  # x_j + i y_j components of the outward unit normal
    signs = np.array([(-1) ** j for j in range(n)])
    form = orientation(n) * kappa(n) * 0.5 * np.sum(c * signs * nu, axis=-1)
    fv = f(zeta) if callable(f) else f.evaluate(zeta)
    return complex(factorial(n - 1) / (2j * pi) ** n * np.sum(w * fv * form))


# ---------------------------------------------------------------------------
# model integrals


def _graded_breaks(lo, hi, ratio=1.6):
    pts = [0.0]
    x = lo
    while x < hi:
        pts.append(x)
        x *= ratio
    pts.append(hi)
    return np.array(pts)


def _clip_rule(breaks, order, lo, hi):
    """Gauss rule on each panel of ``breaks`` clipped to ``[lo, hi]`` (lo, hi
    arrays of shape (P,)).  Returns nodes and weights of shape (P, Q)."""
    x, w = np.polynomial.legendre.leggauss(order)
    a = np.clip(breaks[:-1][None, :], lo[:, None], hi[:, None])
    b = np.clip(breaks[1:][None, :], lo[:, None], hi[:, None])
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[:, :, None] + half[:, :, None] * x[None, None, :]
    weights = half[:, :, None] * w[None, None, :]
    P = len(lo)
    return nodes.reshape(P, -1), weights.reshape(P, -1)


def _model_kernel(k, h, eps, eta1, eta_rest, s):
    """``K{k,h}`` with ``eta1 >= 0``, other ``eta`` and radii ``s`` as arrays."""
    sum_eta = eta1 + np.sum(eta_rest, axis=-1)
    sum_w = np.sum(s, axis=-1)
    d1 = eps + sum_eta + sum_w
    d2 = np.sqrt(eps) + np.sqrt(eta1) + np.sum(eta_rest, axis=-1) + sum_w
    return d1 ** (-float(k)) * d2 ** (-2.0 * h)


def _nested_integral(k, h, eps, n, m, region, delta, order, ratio):
    """Integrate ``K{k,h}`` over ``V(delta)`` (``region='V'``) or over
    ``B(1) minus V(delta)`` (``region='B'``).

    Variables: the quadratic ones (``eta_2..eta_m`` and the radii ``s_j`` of
    the ``w_j``) first, in a nested ball, then ``eta_1``.  Symmetry in the
    signs of ``eta`` gives the factor ``2^m`` and each ``w_j`` contributes
    ``2 pi s_j ds_j``.
    """
    nq = (m - 1) + (n - m)
    lo_b = min(1e-4 * eps, 1e-4 * delta**2)
    breaks = _graded_breaks(lo_b, 1.0, ratio)
    R2 = np.array([delta**2 if region == "V" else 1.0])
    pts = np.zeros((1, 0))
    wts = np.ones(1)
    for _ in range(nq):
        used = np.sum(pts**2, axis=-1)
        hi = np.sqrt(np.maximum(R2 - used, 0.0))
        nodes, weights = _clip_rule(breaks, order, np.zeros_like(hi), hi)
        P, Q = nodes.shape
        pts = np.concatenate([np.repeat(pts, Q, axis=0), nodes.reshape(-1, 1)], axis=1)
        wts = (wts[:, None] * weights).reshape(-1)
        keep = wts > 0
        pts, wts = pts[keep], wts[keep]
    used = np.sum(pts**2, axis=-1)
    if region == "V":
        lo = np.zeros(len(pts))
        hi = np.maximum(delta**2 - used, 0.0)
    else:
        lo = np.maximum(delta**2 - used, 0.0)
        hi = np.sqrt(np.maximum(1.0 - used, 0.0))
        hi = np.maximum(hi, lo)
    nodes, weights = _clip_rule(breaks, order, lo, hi)
    eta_rest = pts[:, : m - 1]
    s = pts[:, m - 1 :]
    jac = np.prod(2 * pi * s, axis=-1) if s.shape[1] else np.ones(len(pts))
    Kv = _model_kernel(k, h, eps, nodes, eta_rest[:, None, :], s[:, None, :])
    total = np.sum(wts[:, None] * jac[:, None] * weights * Kv)
    return float(2**m * total)


def case_prediction(k, h, n, m):
    """Predicted behaviour of ``I_1{k,h}`` from the case table.

    Returns ``(branch, exponent, log_power)``; branches 2 and 4 are bounded
    in ``eps`` (exponent 0, no log).
    """
    d = 2 * n - m
    if k >= d - 1:
        if k + h >= d:
            return 1, d - k - h, 2
        return 2, 0.0, 0
    if k + 2 * h >= d + 1:
        return 3, (d - k - 2 * h + 1) / 2.0, 1
    return 4, 0.0, 0


def i2_bounded(k, h, n, m):
    d = 2 * n - m
    return (k >= d - 1 and k + h <= d) or (k <= d - 2 and k + 2 * h <= d + 2)


@dataclass
class ModelIntegralReport:
    k: int
    h: float
    n: int
    m: int
    eps: list
    I1: list
    slope: float
    slope_log_corrected: float
    branch: int
    predicted: float
    log_power: int
    delta: float
    log_power_fit: float = 0.0
    I2: dict = field(default_factory=dict)
    I2_delta_ratio: float = float("nan")

    @property
    def error(self):
        return abs(self.slope_log_corrected - self.predicted)


def _fit_with_log(le, lI, p, steps=201):
    """Least-squares fit of ``log I = a log eps + p' log|log eps| + c`` with
    ``p'`` restricted to ``[0, p]``; returns ``(a, p')``."""
    best = None
    for pp in np.linspace(0.0, p, steps) if p else [0.0]:
        y = lI - pp * np.log(np.abs(le))
        coef, res, *_ = np.polyfit(le, y, 1, full=True)
        sse = float(res[0]) if len(res) else 0.0
        if best is None or sse < best[0] - 1e-15:
            best = (sse, float(coef[0]), float(pp))
    return best[1], best[2]


def model_integrals(k, h, eps_ladder, delta=0.5, n=2, m=1, order=10, ratio=1.6, i2_deltas=None):
    """Evaluate ``I_1{k,h}(eps, delta)`` on a geometric ``eps`` ladder and fit
    the exponent of ``eps``.

    ``slope`` is the raw log-log slope; ``slope_log_corrected`` is the
    exponent of ``eps`` in a fit of ``eps^a |log eps|^p'`` with the log power
    ``p'`` fitted inside ``[0, p]`` (``p`` from the case table, which bounds
    the integral from above).  With
    ``i2_deltas`` the ``I_2`` integral is evaluated at the smallest ``eps``
    for each ``delta`` and ``max/min`` of ``I_2 * delta`` is reported.
    """
    eps = np.asarray(sorted(eps_ladder, reverse=True), float)
    I1 = np.array([_nested_integral(k, h, e, n, m, "V", delta, order, ratio) for e in eps])
    branch, pred, p = case_prediction(k, h, n, m)
    le = np.log(eps)
    slope = float(np.polyfit(le, np.log(I1), 1)[0])
    corr, p_fit = _fit_with_log(le, np.log(I1), p)
    rep = ModelIntegralReport(k, h, n, m, eps.tolist(), I1.tolist(), slope, corr, branch, pred, p, delta, p_fit)
    if i2_deltas:
        vals = {float(d): _nested_integral(k, h, eps[-1], n, m, "B", d, order, ratio) for d in i2_deltas}
        rep.I2 = vals
        prods = [v * d for d, v in vals.items()]
        rep.I2_delta_ratio = float(max(prods) / min(prods))
    return rep


# ---------------------------------------------------------------------------
# test forms


def _bump(s2):
    """``exp(1 - 1/(1 - s2))`` inside the unit ball, zero outside; arrays or
    jets in ``s2``."""
    if isinstance(s2, Jet):
        u = s2 * -1.0 + 1.0
        mask = np.real(u.val) > 1e-6
        c = u.c.copy()
        c[..., ~mask] = 0.0
        c[0, 0][~mask] = 1.0
        e = (Jet(c).reciprocal() * -1.0 + 1.0).exp()
        return e * mask.astype(float)
    s2 = np.real(s2)
    out = np.zeros(np.shape(s2))
    inside = s2 < 1 - 1e-6
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s2[inside]))
    return out


class TestFormLibrary:
    """Compactly supported tangential forms on a hypersurface chart.

    Every form is a bump ``beta`` of radius ``a`` centered at chart
    parameters ``(Y0, W0)`` times polynomial coefficients.
    """

    __test__ = False  # not a pytest class

    def __init__(self, chart, a=0.25, Y0=None, W0=None):
        self.chart = chart
        self.n, self.m = chart.n, chart.m
        self.a = a
        self.Y0 = np.zeros(self.m) if Y0 is None else np.asarray(Y0, float)
        self.W0 = np.zeros(self.n - self.m, complex) if W0 is None else np.asarray(W0, complex)

    def beta(self, Y, W, Wb):
        dY = Y - self.Y0
        dW = W - self.W0
        dWb = Wb - np.conj(self.W0)
        s2 = ((dY * dY).sum(-1) + (dW * dWb).sum(-1)) * (1.0 / self.a**2)
        return _bump(s2)

    def form(self, name):
        """Named (0,r) forms: ``bump_dzbar{j}`` (``beta dzbar_j``),
        ``bump_poly`` (polynomial coefficients on two differentials),
        ``bump_pair`` (a (0,2) form) and ``zero``."""
        ch, m = self.chart, self.m
        if name == "zero":
            return MForm.tangential(ch, {(m,): lambda Y, W, Wb: 0.0 * self.beta(Y, W, Wb)})
        if name.startswith("bump_dzbar"):
            j = int(name[len("bump_dzbar") :]) - 1
            return MForm.tangential(ch, {(j,): self.beta})
        if name == "bump_poly":
            return MForm.tangential(
                ch,
                {
                    (m,): lambda Y, W, Wb: self.beta(Y, W, Wb) * (W[..., 0] * Wb[..., 1] + 1.0),
                    (m + 1,): lambda Y, W, Wb: self.beta(Y, W, Wb) * (Y[..., 0] * 2.0),
                },
            )
        if name == "bump_pair":
            return MForm.tangential(ch, {(m, m + 1): self.beta})
        raise KeyError(name)

    def names(self):
        return ["bump_dzbar2", "bump_poly", "zero"]

    def sample_points(self, rng, count, frac=0.5):
        """Points of ``M`` with parameters inside ``frac`` of the support."""
        m, nw = self.m, self.n - self.m
        d = m + 2 * nw
        v = rng.normal(size=(count, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= (rng.uniform(0, 1, size=(count, 1)) ** (1.0 / d)) * frac * self.a
        Y = self.Y0 + v[:, :m]
        W = self.W0 + v[:, m : m + nw] + 1j * v[:, m + nw :]
        return self.chart.point(Y, W)


# ---------------------------------------------------------------------------
# centered tube grids


@dataclass
class CenteredGrid:
    """Quadrature nodes on both sheets ``rho = +-eps`` centered at ``z``.

    ``zeta`` (N, n); ``nc`` (N, n) = weight times ``dbar rho / (d rho/dx_1)``
    times the sheet sign (outward); ``sigma`` (N,) sheet signs.
    """

    eps: float
    z: np.ndarray
    zeta: np.ndarray
    nc: np.ndarray
    sigma: np.ndarray
    t_nodes: np.ndarray
    t_weights: np.ndarray
    shape: tuple


@dataclass
class GridSpec:
    """Resolution of a centered grid: points in the characteristic variable,
    in the tangential radius and on the direction sphere.

    Directions use the product rule of :func:`complex_sphere_rule` with
    ``n_phase`` points per phase and ``n_simplex`` per simplex coordinate;
    with ``n_phase = 0`` they are ``n_dir`` scrambled Sobol points instead.
    """

    n_y: int = 24
    n_r: int = 24
    n_phase: int = 4
    n_simplex: int = 3
    y_extent: float = 0.6
    r_extent: float = 0.6
    t_order: int | None = None
    seed: int = 0
    n_dir: int = 256

    def directions(self, k):
        """Unit vectors of ``C^k`` (real layout) and their weights."""
        if self.n_phase > 0:
            return complex_sphere_rule(k, self.n_phase, self.n_simplex)
        return sphere_points(2 * k, self.n_dir, self.seed)

    def nodes_per_sheet(self, k):
        if self.n_phase > 0:
            nd = self.n_phase**k * self.n_simplex ** (k - 1)
        else:
            nd = 2 * max(self.n_dir // 2, 1)
        return self.n_y * self.n_r * nd


def _level_x(M, Y, W, level, x0):
    """Solve ``rho(x + iY, W) = level`` for real ``x`` (Newton)."""
    x = np.array(x0, float)
    p = M.rho[0]
    g1 = M.grad_bar[0][0]
    for _ in range(60):
        zeta = np.concatenate([(x + 1j * Y)[..., None], W], -1)
        r = np.real(p.evaluate(zeta)) - level
        dx = 2 * np.real(g1.evaluate(zeta))
        step = r / dx
        x = x - step
        if np.max(np.abs(step)) < 1e-15 * (1 + np.max(np.abs(x))):
            break
    return x


def _ridge(M, z):
    """Coefficients ``(alpha, beta)`` with ``Im(d rho(z) . (zeta - z)) ~
    alpha y + Re(beta . w')`` to first order in the chart parameters."""
    chart = M.graph
    n = M.n
    Yz, Wz = chart.params(z[None])
    dirs = [("Y", 0)] + [("W", j) for j in range(n - 1)] + [("Wb", j) for j in range(n - 1)]
    from .forms import seed as _seed

    v = _seed({"Y": Yz.astype(complex), "W": Wz, "Wb": np.conj(Wz)}, dirs)
    X = chart.phi(v["Y"], v["W"], v["Wb"])
    dX = X.c[1:, 0, 0, 0]  # derivatives in Y, W_j, Wb_j
    a = M.jacobian(z[None])[0, 0]
    alpha = np.imag(a[0] * (dX[0] + 1j))
    cW = a[0] * dX[1:n] + a[1:]
    cWb = a[0] * dX[n:]
    # Im(c w + d wbar) = Im((c - conj d) w) = Re(-i (c - conj d) w)
    beta = -1j * (cW - np.conj(cWb))
    return float(alpha), beta


def centered_grid(M, z, eps, spec):
    """Grid on ``{rho = +eps} u {rho = -eps}`` around ``z in M`` (m = 1)."""
    if M.m != 1:
        raise NotImplementedError("centered grids are implemented for hypersurfaces")
    n = M.n
    chart = M.graph
    z = np.asarray(z, complex)
    Yz, Wz = chart.params(z[None])
    alpha, beta = _ridge(M, z)
    # characteristic variable y = eps sinh(u)
    umax = np.arcsinh(spec.y_extent / eps)
    u, wu = gauss_legendre(spec.n_y, -umax, umax)
    y = eps * np.sinh(u)
    wy = wu * eps * np.cosh(u)
    # tangential radius r = sqrt(eps) sinh(v)
    se = np.sqrt(eps)
    vmax = np.arcsinh(spec.r_extent / se)
    v, wv = gauss_legendre(spec.n_r, 0.0, vmax)
    r = se * np.sinh(v)
    dim = 2 * (n - 1)
    wr = wv * se * np.cosh(v) * r ** (dim - 1)
    dirs, wd = spec.directions(n - 1)
    dc = dirs[:, : n - 1] + 1j * dirs[:, n - 1 :]
    # tensor product: (dir, r, y)
    wprime = (r[None, :, None] * dc[:, None, :]).reshape(-1, n - 1)  # (Nd*Nr, n-1)
    wdr = (wd[:, None] * wr[None, :]).reshape(-1)
    y0 = -np.real(wprime @ beta) / alpha
    Y = Yz[0, 0] + y0[:, None] + y[None, :]
    W = Wz[0][None, None, :] + wprime[:, None, :]
    W = np.broadcast_to(W, Y.shape + (n - 1,))
    wt = (wdr[:, None] * wy[None, :]).reshape(-1)
    Y = Y.reshape(-1)
    W = W.reshape(-1, n - 1)
    X0 = chart.phi(Y[:, None], W)[:, 0]
    zetas, ncs, sig = [], [], []
    for sigma in (1.0, -1.0):
        x = _level_x(M, Y, W, sigma * eps, X0)
        zeta = np.concatenate([(x + 1j * Y)[:, None], W], -1)
        gb = M.jacobian_bar(zeta)[:, 0, :]
        rx = 2 * np.real(gb[:, 0])
        zetas.append(zeta)
        ncs.append(sigma * wt[:, None] * gb / rx[:, None])
        sig.append(np.full(len(Y), sigma))
    order = spec.t_order or max(1, int(np.ceil((n - 1) / 2)))
    tn, tw = gauss_legendre(order)
    return CenteredGrid(
        eps, z, np.concatenate(zetas), np.concatenate(ncs), np.concatenate(sig), tn, tw,
        (len(wd), spec.n_r, spec.n_y),
    )


# ---------------------------------------------------------------------------
# kernel evaluation


def _z_jets(M, z, mode):
    """Jets of ``(z, zbar)`` at one point: ``mode='dbar'`` puts the tangential
    frame in the outer group; ``mode='zbar'`` seeds ``zbar`` in the inner
    group after the ``n`` ``zetabar`` slots; ``mode='plain'`` has no seeds."""
    n = M.n
    zv = z[None]
    if mode == "dbar":
        V = cr_frame(M, zv)[0]  # (n, n-m)
        K2 = V.shape[1]
        zj = Jet.const(zv, 0, K2)
        zbj = Jet.seed(np.conj(zv), d2=np.moveaxis(V, -1, 0)[:, None, :])
        return zj, zbj, V
    if mode == "zbar":
        zj = Jet.const(zv, 2 * n, 0)
        d1 = np.zeros((2 * n, 1, n), complex)
        for a in range(n):
            d1[n + a, 0, a] = 1.0
        zbj = Jet.seed(np.conj(zv), d1=d1)
        return zj, zbj, cr_frame(M, zv)[0]
    return Jet.const(zv), Jet.const(np.conj(zv)), cr_frame(M, zv)[0]


def _sections(B, zeta, sigma, zj, zbj, Pis, K1):
    """Jets of ``b`` and ``p = P/Phi`` at nodes (inner ``zetabar`` seeds)."""
    n = B.n
    N = len(zeta)
    d1 = np.zeros((K1, N, n), complex)
    for l in range(n):
        d1[l, :, l] = 1.0
    zbj_nodes = Jet.seed(np.conj(zeta), d1=d1)
    zj_nodes = Jet.const(zeta)
    out_p = []
    idx_sets = []
    for s, Pi in Pis.items():
        idx = np.nonzero(sigma == s)[0]
        if not len(idx):
            continue
        th = np.full((len(idx), 1), -s)
        d = B.evaluate(zj_nodes[idx], zj, zbj_nodes[idx], zbj, Pi=Pi, theta=th)
        P = J.as_jet(d["P"])
        Phi = J.as_jet(d["Phi"])
        out_p.append((idx, P / Phi.expand(-1), d["w"], d["wb"]))
        idx_sets.append(idx)
    return out_p


def _bm_jet(w, wb):
    w, wb = J.as_jet(w), J.as_jet(wb)
    n2 = (w * wb).sum(-1)
    return wb / n2.expand(-1)


def _assemble(parts, N, K1, K2, n):
    """Gather per-sheet jets into full arrays ``c`` of shape
    (1+K1, 1+K2, N, n)."""
    out = np.zeros((1 + K1, 1 + K2, N, n), complex)
    for idx, x in parts:
        c = x.c
        out[: c.shape[0], : c.shape[1]][:, :, idx] = c
    return out


def _det_stack(cols, K2):
    """Determinants of matrices whose columns are given as arrays of shape
    (1+K2, N, n); returns (1+K2, N)."""
    Mfull = np.stack(cols, axis=-1)  # (1+K2, N, n, n)
    if K2 == 0:
        return batched_det(Mfull[0])[None]
    d, dd = det_jet(Mfull[0], np.moveaxis(Mfull[1:], 0, 1))
    return np.concatenate([d[None], dd.T], axis=0)


def _kernel_sum(kind, r, B, grid, gvals, z, mode, chunk=4096):
    """Sum of the kernel over the grid for one output point.

    ``kind`` is ``'R'`` (interpolated section with ``t``), ``'H'``
    (``P/Phi``) or ``'B'`` (the Bochner-Martinelli section alone).  ``gvals`` maps tangential index tuples ``K`` (|K| = r) to
    coefficient arrays at the nodes.  Returns a dict from ambient ``dzbar``
    index tuples ``A`` to arrays of shape (1+K2,) (value and outer
    derivatives), before the prefactor.
    """
    n = B.n
    M = B.M
    zj, zbj, V = _z_jets(M, z, mode)
    K2 = zj.k2 or zbj.k2
    nA = r - 1 if kind == "R" else r
    needs_zbar = nA > 0
    if needs_zbar and mode != "zbar":
        raise ValueError("kernels with dzbar columns need mode='zbar'")
    K1 = 2 * n if mode == "zbar" else n
    Pis = {s: B.projector(np.array([[-s]]), zj, zbj) for s in (1.0, -1.0)}
    kap = kappa(n) * orientation(n)
    jsign = np.array([(-1) ** j for j in range(n)], float)
    nS = n - 1 - nA - (1 if kind == "R" else 0)
    if nS < 0:
        raise DegreeOutOfRange("form degree too large for the kernel")
    A_sets = list(itertools.combinations(range(n), nA))
    S_sets = list(itertools.combinations(range(n), nS))
    # contraction plan: for each S, the complement C (|C| = r + 1); choose
    # the missing index j in C and K = C - {j}
    plan = {}
    for S in S_sets:
        C = [i for i in range(n) if i not in S]
        items = []
        for j in C:
            K = tuple(i for i in C if i != j)
            if K not in gvals:
                continue
            rest = [i for i in range(n) if i != j]
            sgn = _perm_sign(list(K) + list(S)) if sorted(list(K) + list(S)) == rest else 0
            items.append((j, K, sgn))
        if items:
            plan[S] = items
    # dzbar's are moved in front of g; for R the dt is moved past omega(zeta)
    # and (-1)^(r+1) makes dbar R_r + R_(r+1) dbar + H_r reproduce the BM term
    if kind == "R":
        form_sign = (-1) ** (r * (r - 1)) * (-1) ** n * (-1) ** (r + 1)
    else:
        form_sign = (-1) ** (r * r)
    acc = {A: [] for A in A_sets}
    N = len(grid.zeta)
    for s0 in range(0, N, chunk):
        sl = slice(s0, min(N, s0 + chunk))
        zeta = grid.zeta[sl]
        sig = grid.sigma[sl]
        nc = grid.nc[sl]
        g_loc = {K: np.asarray(v[sl]) for K, v in gvals.items()}
        if all(not np.any(v) for v in g_loc.values()):
            continue
        parts = _sections(B, zeta, sig, zj, zbj, Pis, K1)
        pc = _assemble([(i, p) for i, p, _, _ in parts], len(zeta), K1, K2, n)
        if kind in ("R", "B"):
            bparts = [(i, _bm_jet(w, wb)) for i, _, w, wb in parts]
            bc = _assemble(bparts, len(zeta), K1, K2, n)
        # coefficient factor per (S, node): sum_j g_K sgn (-1)^j kappa nc_j
        fac = {}
        for S, items in plan.items():
            f = 0.0
            for j, K, sgn in items:
                f = f + sgn * jsign[j] * g_loc[K] * nc[:, j]
            fac[S] = f * kap * form_sign
        t_list = list(zip(grid.t_nodes, grid.t_weights)) if kind == "R" else [(None, 1.0)]
        for t, tw in t_list:
            if kind == "R":
                X = (1 - t) * bc + t * pc
                first, last = bc[0], pc[0]
            elif kind == "B":
                X = bc
                first, last = bc[0], None
            else:
                X = pc
                first, last = pc[0], None
            for A in A_sets:
                for S in plan:
                    cols = [first] + [X[1 + n + a] for a in A] + [X[1 + l] for l in S]
                    if last is not None:
                        cols.append(last)
                    d = _det_stack(cols, K2)  # (1+K2, Nc)
                    acc[A].append(tw * np.sum(d * fac[S][None, :], axis=1))
    out = {}
    for A, lst in acc.items():
        out[A] = np.sum(np.array(lst), axis=0) if lst else np.zeros(1 + K2, complex)
    return out, V


def _g_at_nodes(g, zeta):
    vals = g.at_zeta(zeta)
    m = g.m
    return {tuple(m + l[1] for l in k): np.asarray(v, complex) * np.ones(len(zeta)) for k, v in vals.items()}


def _dbar_g_at_nodes(dg, zeta, chunk=4096):
    m = dg.m
    out = {}
    for s0 in range(0, len(zeta), chunk):
        zc = zeta[s0 : s0 + chunk]
        Y = zc[:, :m].imag
        W = zc[:, m:]
        vals = dg.evaluate(Y, W)
        for k, v in vals.items():
            K = tuple(m + l[1] for l in k)
            out.setdefault(K, []).append(np.asarray(J.value(v), complex) * np.ones(len(zc)))
    return {K: np.concatenate(v) for K, v in out.items()}


def _check_degree(r, q, kind):
    if r < 1:
        raise DegreeOutOfRange(f"{kind} requires r >= 1")


def local_R(B, g, r, eps, spec, z_samples, with_dbar=False):
    """``R_r(eps)`` applied to the tangential (0,r) form ``g`` at ``z_samples``.

    Returns a list (one entry per sample) of dicts from tangential index
    tuples (|K| = r - 1) to values; with ``with_dbar`` the dict for ``r = 1``
    also carries ``'dbar'``: the tangential (0,1) coefficients of
    ``dbar_M R_1 g``.
    """
    _check_degree(r, B.q, "R_r")
    M = B.M
    if g.degree() != r:
        raise DegreeOutOfRange(f"form of degree {g.degree()} given to R_{r}")

    def one(z):
        grid = centered_grid(M, z, eps, spec)
        gv = _g_at_nodes(g, grid.zeta)
        mode = "dbar" if (with_dbar and r == 1) else ("zbar" if r > 1 else "plain")
        raw, V = _kernel_sum("R", r, B, grid, gv, z, mode)
        c = prefactor(M.n, r)
        res = project_tangential(M, {A: c * v[0] for A, v in raw.items()}, V) if r > 1 else {(): c * raw[()][0]}
        if mode == "dbar":
            res["dbar"] = {(M.m + j,): c * raw[()][1 + j] for j in range(M.n - M.m)}
        return res

    return _map(one, z_samples)


def local_H(B, g, r, eps, spec, z_samples):
    """``H_r(eps)`` applied to ``g`` at ``z_samples`` (tangential (0,r))."""
    _check_degree(r, B.q, "H_r")
    M = B.M

    def one(z):
        grid = centered_grid(M, z, eps, spec)
        gv = _g_at_nodes(g, grid.zeta)
        raw, V = _kernel_sum("H", r, B, grid, gv, z, "zbar")
        c = prefactor(M.n, r)
        return project_tangential(M, {A: c * v[0] for A, v in raw.items()}, V)

    return _map(one, z_samples)


def _map(fn, items):
    items = list(items)
    k = min(threads(), len(items))
    if k <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# homotopy residual


@dataclass
class OperatorRun:
    manifold: str
    r: int
    rows: list = field(default_factory=list)
    t_order: int = 0
    extrapolated: float | None = None

    def residuals(self):
        return [row["residual"] for row in self.rows]

    def non_increasing(self, slack=0.0):
        res = self.residuals()
        return all(b <= a * (1 + slack) for a, b in zip(res, res[1:]))


def residual_at(B, g, eps, spec, z_samples):
    """Coefficients of ``g - dbar_M R_1 g - R_2 dbar_M g - H_1 g`` at the
    samples (``r = 1``) and the three operator contributions."""
    M = B.M
    m = M.m
    z_samples = np.asarray(z_samples)
    dg = dbar_M(g)
    R1 = local_R(B, g, 1, eps, spec, z_samples, with_dbar=True)
    has_dg = B.n - m >= 2
    R2 = local_R_from_values(B, dg, 2, eps, spec, z_samples) if has_dg else [dict() for _ in z_samples]
    H1 = local_H(B, g, 1, eps, spec, z_samples) if B.q <= 1 else [dict() for _ in z_samples]
    Yz, Wz = M.graph.params(z_samples)
    gz = g.evaluate(Yz, Wz)
    gz = {tuple(m + l[1] for l in k): np.asarray(v) * np.ones(len(z_samples)) for k, v in gz.items()}
    rows = []
    for i in range(len(z_samples)):
        res = {}
        for j in range(m, M.n):
            K = (j,)
            val = gz.get(K, np.zeros(len(z_samples)))[i]
            val = val - R1[i]["dbar"].get(K, 0.0) - R2[i].get(K, 0.0) - H1[i].get(K, 0.0)
            res[K] = complex(val)
        rows.append(
            {
                "residual": res,
                "g": {K: complex(v[i]) for K, v in gz.items()},
                "dbarR": R1[i]["dbar"],
                "Rdbar": R2[i],
                "H": H1[i],
            }
        )
    return rows


def local_R_from_values(B, form, r, eps, spec, z_samples):
    """``R_r`` of a form whose coefficients are evaluated through
    :func:`dbar_M` style evaluators (parameter jets)."""
    M = B.M

    def one(z):
        grid = centered_grid(M, z, eps, spec)
        gv = _dbar_g_at_nodes(form, grid.zeta)
        raw, V = _kernel_sum("R", r, B, grid, gv, z, "zbar")
        c = prefactor(M.n, r)
        return project_tangential(M, {A: c * v[0] for A, v in raw.items()}, V)

    return _map(one, z_samples)


def homotopy_residual(B, g, ladder, z_samples, richardson=False, manifold="manifold"):
    """Residual sup-norm of the local homotopy formula along a ladder of
    ``(eps, GridSpec)`` rungs (``r = 1``).

    The residual is ``max_z max_K |g - dbar_M R_1 g - R_2 dbar_M g - H_1 g|``
    relative to ``max |g|`` over the same samples (absolute when ``g = 0``).
    """
    run = OperatorRun(manifold=manifold, r=1)
    gnorm = None
    prev = None
    for eps, spec in ladder:
        t0 = time.perf_counter()
        rows = residual_at(B, g, eps, spec, z_samples)
        secs = time.perf_counter() - t0
        res = max(abs(v) for row in rows for v in row["residual"].values())
        if gnorm is None:
            gnorm = max([abs(v) for row in rows for v in row["g"].values()] + [0.0])
        rel = res / gnorm if gnorm > 0 else res
        vec = np.array([row["residual"][K] for row in rows for K in sorted(row["residual"])])
        run.rows.append(
            {
                "epsilon": eps,
                "nodes": 2 * spec.nodes_per_sheet(B.n - B.M.m),
                "residual": rel,
                "seconds": secs,
                "vector": vec,
            }
        )
        run.t_order = spec.t_order or max(1, int(np.ceil((B.n - 1) / 2)))
        prev = rows
    if richardson and len(run.rows) >= 2:
        a, b = run.rows[-2], run.rows[-1]
        ratio = a["epsilon"] / b["epsilon"]
        # leading error taken proportional to sqrt(eps)
        k = np.sqrt(ratio)
        extra = (k * b["vector"] - a["vector"]) / (k - 1)
        # residual of the extrapolated values
        run.extrapolated = float(np.max(np.abs(extra)) / gnorm) if gnorm else float(np.max(np.abs(extra)))
    del prev
    return run


# ---------------------------------------------------------------------------
# global assembly


class GlobalOperators:
    """Partition-of-unity assembly of chart-local operators.

    ``local_R(i, form, r, z)`` and ``local_H(i, form, r, z)`` evaluate the
    chart operators (values at points ``z``); the cover supplies
    ``theta_i`` and ``theta'_i``.
    """

    def __init__(self, cover, local_R, local_H=None, check_points=None):
        if check_points is not None:
            cover.validate(check_points)
        self.cover = cover
        self.local_R = local_R
        self.local_H = local_H

    def R(self, g, r, z):
        total = None
        for i in range(self.n_charts):
            tp = np.real(J.value(self.cover.theta_prime(i, z)))
            if not np.any(tp):
                continue
            gi = _mul_form(g, lambda zz, i=i: self.cover.theta(i, zz))
            vals = self.local_R(i, gi, r, z)
            term = {K: tp * v for K, v in vals.items()}
            total = term if total is None else {K: total.get(K, 0) + term.get(K, 0) for K in set(total) | set(term)}
        return total or {}

    @property
    def n_charts(self):
        return len(getattr(self.cover, "centers", getattr(self.cover, "thetas", [])))


def _mul_form(g, fn):
    """Multiply the coefficients of an :class:`MForm` by a function of the
    ambient point."""
    chart = g.chart
    m = g.m

    def wrap(f):
        def h(Y, W, Wb):
            if isinstance(Y, Jet) or isinstance(W, Jet):
                raise NotImplementedError("cutoffs on jets are not supported here")
            z = np.concatenate([chart.phi(np.asarray(Y, float), W) + 1j * np.asarray(Y, float), W], -1)
            return f(Y, W, Wb) * np.real(J.value(fn(z)))

        return h

    return MForm(chart, {k: wrap(f) for k, f in g.terms.items()})


def assemble_global(cover, local_R, local_H=None, check_points=None):
    """Global ``R_M`` from chart operators and a cover; see
    :class:`GlobalOperators`.  Raises ``CoverMismatch`` when the partition
    does not sum to one on ``check_points``."""
    return GlobalOperators(cover, local_R, local_H, check_points)
