"""Strong M-barrier: construction, inequality checks and derived kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jet as J
from .errors import DegreeOutOfRange, EigenvalueTie, SingularPoint
from .forms import (
    FormField,
    GradedForm,
    LeraySection,
    Probe,
    bochner_martinelli,
    convex_section,
    omega_prime_r,
    omega_zeta,
    probe_values,
    seed,
    wedge,
)
from .geometry import negative_subspaces
from .jet import Jet
from .poly import eval_matrix

DIST_FLOOR = 1e-9
PHI_FLOOR = 1e-12


def _eye(n, shape):
    return np.broadcast_to(np.eye(n, dtype=complex), shape + (n, n))


def _T(x):
    return x.T if isinstance(x, Jet) else np.swapaxes(x, -1, -2)


def complement_projector(G, k, tie_tol=1e-9):
    """Orthogonal projector onto the span of the eigenvectors of the
    hermitian ``G`` beyond the ``k`` smallest eigenvalues.

    ``G`` may be a jet; the projector is ``(I + sign(G - cI)) / 2`` with the
    cut ``c`` in the middle of the spectral gap, computed by the Newton sign
    iteration so that derivatives propagate.
    """
    Gv = J.value(G)
    n = Gv.shape[-1]
    S = Gv.shape[:-2]
    if k >= n:
        z = np.zeros(S + (n, n), complex)
        return Jet.const(z, G.k1, G.k2) if isinstance(G, Jet) else z
    lam = np.linalg.eigvalsh(0.5 * (Gv + np.conj(np.swapaxes(Gv, -1, -2))))
    scale = np.maximum(np.abs(lam).max(axis=-1), 1.0)
    if k > 0:
        gap = lam[..., k] - lam[..., k - 1]
        if np.any(gap < tie_tol * scale):
            raise EigenvalueTie(f"eigenvalue gap {gap.min():.2e} at the selection cut")
        cut = 0.5 * (lam[..., k] + lam[..., k - 1])
    else:
        cut = lam[..., 0] - 1.0
    spread = np.maximum(np.abs(lam - cut[..., None]).max(axis=-1), 1e-300)
    X = (G - cut[..., None, None] * _eye(n, S)) * (1.0 / spread)[..., None, None]
    if isinstance(X, Jet):
        X = X * 1.0
    sgn = J.matrix_sign(X)
    return (sgn + _eye(n, S)) * 0.5


def sqrt_inv_hermitian(g, iters=60):
    """``g^{-1/2}`` by the Denman-Beavers iteration (arrays or jets)."""
    gv = J.value(g)
    n = gv.shape[-1]
    S = gv.shape[:-2]
    Y, Z = g, _eye(n, S) if not isinstance(g, Jet) else Jet.const(_eye(n, S).copy(), g.k1, g.k2)
    for _ in range(iters):
        Yn = (Y + J.inv(Z)) * 0.5
        Zn = (Z + J.inv(Y)) * 0.5
        delta = np.max(np.abs(J.value(Yn) - J.value(Y)))
        Y, Z = Yn, Zn
        if delta < 1e-15:
            break
    for _ in range(2):
        Y, Z = (Y + J.inv(Z)) * 0.5, (Z + J.inv(Y)) * 0.5
    return Z


class Barrier:
    """Barrier data of a defining system.

    Parameters
    ----------
    M : DefiningSystem
    q : int
        Pseudoconcavity index used for the subspace selection.
    theta_sign : float
        ``+1`` gives ``theta_k = -rho_k / rho``; ``-1`` flips the sign (used
        only to demonstrate a failing barrier).
    """

    def __init__(self, M, q, theta_sign=1.0):
        self.M = M
        self.q = q
        self.n, self.m = M.n, M.m
        self.k = q + M.m
        self.theta_sign = theta_sign

    # ------------------------------------------------------------ pieces
    def theta(self, zeta, zetabar=None):
        r = self.M.rho_values(zeta, zetabar)
        if isinstance(r, Jet):
            nr = (r * r).sum(-1).sqrt()
            return r * (-self.theta_sign) / nr.expand(-1)
        nr = np.sqrt(np.sum(r**2, axis=-1, keepdims=True))
        return -self.theta_sign * r / nr

    def levi_matrix(self, theta, z, zbar=None):
        """``G = -L_z rho_theta - L_z rho^2`` in the ``w^* G w`` convention."""
        M = self.M
        H2 = eval_matrix(M.rho2_mixed, z, zbar)
        acc = H2
        for k in range(self.m):
            Hk = eval_matrix(M.hess_mixed[k], z, zbar)
            acc = acc + Hk * theta[..., k : k + 1, None] if isinstance(theta, Jet) else acc + Hk * theta[..., k, None, None]
        return -_T(acc)

    def projector(self, theta, z, zbar=None):
        """Projector onto the complement of ``E_{q+m}(theta, z)``."""
        return complement_projector(self.levi_matrix(theta, z, zbar), self.k)

    def Q(self, theta, w, z, zbar=None):
        """``Q^{(k)}_i`` stacked with shape (..., m, n)."""
        M = self.M
        g = M.jacobian(z, zbar)
        H2 = eval_matrix(M.rho2_holo, z, zbar)
        H2w = _matvec(H2, w)
        rows = []
        for k in range(self.m):
            Hk = eval_matrix(M.hess_holo[k], z, zbar)
            th = theta[..., k : k + 1] if isinstance(theta, Jet) else theta[..., k, None]
            rows.append(-g[..., k, :] - _matvec(Hk, w) * 0.5 - H2w * th * 0.5)
        return J.stack(rows, axis=-2) if any(isinstance(r, Jet) for r in rows) else np.stack(rows, axis=-2)

    # ------------------------------------------------------------ assembly
    def evaluate(self, zeta, z, zetabar=None, zbar=None, Pi=None, theta=None):
        """All barrier quantities at ``(zeta, z)``.

        For arrays ``zetabar``/``zbar`` default to conjugates.  Returns a
        dict with ``theta`` (…, m), ``Q`` (…, m, n), ``F`` (…, m), ``Pi``
        (…, n, n), ``P`` (…, n), ``Phi`` (…), ``calA`` (…).
        """
        if zetabar is None:
            zetabar = np.conj(zeta)
        if zbar is None:
            zbar = np.conj(z)
        w = zeta - z
        wb = zetabar - zbar
        th = self.theta(zeta, zetabar) if theta is None else theta
        Q = self.Q(th, w, z, zbar)
        if Pi is None:
            Pi = self.projector(th, z, zbar)
        PA = _matvec(_T(Pi), wb)
        P = PA
        F = []
        for k in range(self.m):
            Qk = Q[..., k, :]
            thk = th[..., k : k + 1] if isinstance(th, Jet) else th[..., k, None]
            P = P + Qk * thk
            F.append((Qk * w).sum(-1))
        Phi = (P * w).sum(-1)
        calA = (wb * _matvec(Pi, w)).sum(-1)
        return {"theta": th, "Q": Q, "F": F, "Pi": Pi, "P": P, "Phi": Phi, "calA": calA, "w": w, "wb": wb}

    def phi_values(self, zeta, z):
        return self.evaluate(np.asarray(zeta, complex), np.asarray(z, complex))["Phi"]

    def subspaces(self, theta, z):
        return negative_subspaces(self.M, theta, z, self.q)

    # ------------------------------------------------------------ sections
    def section(self):
        """Leray section ``P / Phi``."""

        def fn(v):
            d = self.evaluate(v["zeta"], v["z"], v["zetabar"], v["zbar"])
            Phi = J.as_jet(d["Phi"])
            _check_singular(v, Phi.val)
            return J.as_jet(d["P"]) / Phi.expand(-1)

        return LeraySection(self.n, fn, name="P/Phi")


def _matvec(A, x):
    if isinstance(A, Jet) or isinstance(x, Jet):
        return (J.as_jet(A) @ J.as_jet(x).expand(-1))[..., 0]
    return np.einsum("...ij,...j->...i", A, x)


def _check_singular(v, Phi):
    w = J.value(v["zeta"]) - J.value(v["z"])
    if np.any(np.linalg.norm(w, axis=-1) < DIST_FLOOR):
        raise SingularPoint("|zeta - z| below floor")
    if np.any(np.abs(Phi) < PHI_FLOOR):
        raise SingularPoint("|Phi| below floor")


def build_barrier(M, q, certify=True, samples=None):
    """Construct the barrier after certifying ``q``-pseudoconcavity."""
    from .geometry import certify_q_pseudoconcave

    if certify and q > 0:
        cert = certify_q_pseudoconcave(M, q, samples)
        if not cert.passed:
            raise ValueError(f"manifold is not {q}-pseudoconcave on the samples (attained {cert.q_attained})")
    return Barrier(M, q)


def interpolated_section(B, bm=None):
    """``(1 - t) conj(zeta - z)/|zeta - z|^2 + t P / Phi``."""
    bm = bm or bochner_martinelli(B.n)
    pphi = B.section()

    def fn(v):
        _check_singular(v, np.ones(1))
        return convex_section(bm, pphi).fn(v)

    return LeraySection(B.n, fn, name="interpolated")


# ---------------------------------------------------------------------------
# sampling helpers


def tube_samples(M, rng, count, radius=0.3, eps_range=(1e-3, 1e-1), spread=0.3):
    """Pairs ``(zeta, z)`` with ``z`` on ``M`` and ``zeta`` on a random tube
    level ``rho(zeta) in eps_range`` near ``z``."""
    from .geometry import _tube_point

    z = M.sample_points(rng, count, radius)
    base = M.sample_points(rng, count, radius)
    mix = rng.uniform(0, 1, size=(count, 1)) ** 2
    base = M.graph.point(*_mix_params(M, z, base, mix * spread / radius))
    theta = M.sample_directions(rng, count)
    eps = np.exp(rng.uniform(np.log(eps_range[0]), np.log(eps_range[1]), size=count))
    zeta = np.stack([_tube_point(M, base[i : i + 1], theta[i : i + 1], eps[i])[0] for i in range(count)])
    return zeta, z


def _mix_params(M, z, other, lam):
    Yz, Wz = M.graph.params(z)
    Yo, Wo = M.graph.params(other)
    lam = np.minimum(lam, 1.0)
    return Yz + lam * (Yo - Yz), Wz + lam * (Wo - Wz)


# ---------------------------------------------------------------------------
# verification


@dataclass
class BarrierReport:
    min_ratio: float
    passed: bool
    witness: tuple
    samples: int
    floor: float


def _ratio(B, zeta, z):
    M = B.M
    phi = B.phi_values(zeta, z)
    return np.abs(phi) / (M.rho_norm(zeta) + np.sum(np.abs(zeta - z) ** 2, axis=-1))


def verify_barrier(B, eps_range=(1e-3, 1e-1), samples=10_000, seed=0, radius=0.3, floor=1e-3, chunk=2000, refine=8, spread=0.3):
    """Minimum of ``|Phi| / (rho(zeta) + |zeta - z|^2)`` over samples.

    The ``refine`` worst samples are polished by a Nelder-Mead search over
    ``zeta`` (with ``z`` fixed and ``rho(zeta)`` kept inside ``eps_range``),
    since the zero set of a failing barrier has real codimension two and is
    rarely hit by sampling alone.  Passes iff the minimum exceeds ``floor``;
    the minimizing pair is returned as the witness.
    """
    from scipy.optimize import minimize

    rng = np.random.default_rng(seed)
    M = B.M
    cand_r, cand_zeta, cand_z = [], [], []
    left = samples
    while left > 0:
        k = min(chunk, left)
        zeta, z = tube_samples(M, rng, k, radius=radius, eps_range=eps_range, spread=spread)
        ratio = _ratio(B, zeta, z)
        cand_r.append(ratio)
        cand_zeta.append(zeta)
        cand_z.append(z)
        left -= k
    ratio = np.concatenate(cand_r)
    zetas = np.concatenate(cand_zeta)
    zs = np.concatenate(cand_z)
    i = int(np.argmin(ratio))
    best, wit = float(ratio[i]), (zetas[i], zs[i])
    n = M.n
    lo, hi = eps_range
    for i in np.argsort(ratio)[:refine]:
        z0 = zs[i : i + 1]

        def obj(x, z0=z0):
            zeta = (x[:n] + 1j * x[n:])[None]
            r = M.rho_norm(zeta)[0]
            if not lo <= r <= hi or np.linalg.norm(zeta - z0) > spread or np.linalg.norm(zeta - M.center) > M.radius:
                return 1e3
            return float(_ratio(B, zeta, z0)[0])

        x0 = np.concatenate([zetas[i].real, zetas[i].imag])
        res = minimize(obj, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 1500})
        if res.fun < best:
            best = float(res.fun)
            wit = ((res.x[:n] + 1j * res.x[n:]), z0[0])
    return BarrierReport(min_ratio=best, passed=bool(best > floor), witness=wit, samples=samples, floor=floor)


def re_phi_model(B, zeta, z):
    """Quadratic model ``(rho - rho^2 + L rho_theta(w) + L rho^2(w))/2 + A``."""
    M = B.M
    zeta = np.asarray(zeta, complex)
    z = np.asarray(z, complex)
    w = zeta - z
    th = B.theta(zeta)
    r = M.rho_values(zeta)
    rn = np.sqrt(np.sum(r**2, axis=-1))
    r2 = np.sum(r**2, axis=-1)
    H = eval_matrix(M.rho2_mixed, z)
    for k in range(M.m):
        H = H + th[..., k, None, None] * eval_matrix(M.hess_mixed[k], z)
    levi = np.einsum("...ij,...i,...j->...", H, w, np.conj(w)).real
    Pi = B.projector(th, z)
    calA = np.einsum("...i,...ij,...j->...", np.conj(w), Pi, w).real
    return 0.5 * (rn - r2 + levi) + calA


def verify_re_phi_taylor(B, z, direction, hs=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3)):
    """Log-log slope of ``|Re Phi - model|`` against ``h`` along
    ``zeta = z + h * direction``.  Returns ``(slope, residuals)``."""
    z = np.asarray(z, complex)
    d = np.asarray(direction, complex)
    d = d / np.linalg.norm(d)
    res = []
    for h in hs:
        zeta = (z + h * d)[None]
        phi = B.phi_values(zeta, z[None])[0]
        res.append(abs(phi.real - re_phi_model(B, zeta, z[None])[0]))
    res = np.array(res)
    ok = res > 0
    if ok.sum() < 2:
        return float("inf"), res
    slope = np.polyfit(np.log(np.asarray(hs)[ok]), np.log(res[ok]), 1)[0]
    return float(slope), res


# ---------------------------------------------------------------------------
# kernels


def h_kernel(B, r):
    """``omega'_r(P/Phi) ^ omega(zeta)`` as a form field."""
    if r < 1:
        raise DegreeOutOfRange("the H kernel is defined for r >= 1")
    n = B.n
    if r > n - 1:
        raise DegreeOutOfRange(f"r={r} exceeds n-1={n - 1}")
    om = omega_prime_r(B.section(), r, with_t=False, check=False)
    oz = omega_zeta(n)

    def ev(probe, outer):
        return wedge(om.evaluate(probe, outer), oz)

    return FormField(n, ev, name=f"H-kernel r={r}")


def check_h_vanishing(B, r, probe, chunk=100):
    """Largest absolute coefficient of the H kernel over the probes, and the
    largest coefficient of the same kernel divided by ``|Phi|^-n`` (the
    scale of a generic coefficient)."""
    K = h_kernel(B, r)
    worst = 0.0
    worst_rel = 0.0
    for s in range(0, len(probe.t), chunk):
        p = Probe(probe.zeta[s : s + chunk], probe.z[s : s + chunk], probe.t[s : s + chunk])
        f = K.evaluate(p)
        phi = np.abs(B.phi_values(p.zeta, p.z))
        scale = phi ** (-B.n) * np.linalg.norm(p.zeta - p.z, axis=-1) ** 0
        for v in f.terms.values():
            worst = max(worst, float(np.max(np.abs(v))))
            worst_rel = max(worst_rel, float(np.max(np.abs(v) / scale)))
    return worst, worst_rel


def probes_near_M(B, rng, count, z_radius=0.3, dist=(0.2, 0.6)):
    """Probe pairs with ``z`` on ``M`` and ``zeta`` off ``M``."""
    M = B.M
    z = M.sample_points(rng, count, z_radius)
    p = Probe.random(rng, count, M.n, dist=dist, z_points=z)
    return p


# ---------------------------------------------------------------------------
# mu / chi decomposition


def smooth_frame(B, theta, z, zbar, U_ref):
    """Orthonormal frame of ``E^perp`` depending smoothly on ``(theta, z)``.

    ``f = Pi U (U^* Pi U)^{-1/2}`` and its conjugate
    ``fbar = Pi^T conj(U) (U^T Pi^T conj(U))^{-1/2}`` (no jet is conjugated).
    Returns ``(f, fbar)`` with frame vectors as columns.
    """
    Pi = B.projector(theta, z, zbar)
    Uc = np.conj(U_ref)
    g = J.as_jet(np.swapaxes(Uc, -1, -2)) @ Pi @ J.as_jet(U_ref)
    f = Pi @ J.as_jet(U_ref) @ sqrt_inv_hermitian(g)
    gT = J.as_jet(np.swapaxes(U_ref, -1, -2)) @ Pi.T @ J.as_jet(Uc)
    fbar = Pi.T @ J.as_jet(Uc) @ sqrt_inv_hermitian(gT)
    return f, fbar


def mu_chi_split(B, probe):
    """Check ``dbar_zeta Abar_j = mu_tau + mu_nu`` and
    ``dbar_zeta Q^(k) = chi^(k)`` at the probes.

    ``dbar_zeta`` of the left sides is taken by jets through the whole
    composition; ``mu_nu`` and ``chi`` are assembled from their formulas
    with ``d theta/d zetabar`` and the derivative of the frame in ``theta``.
    Returns a dict of maximal residuals and component sizes.
    """
    n, m = B.n, B.m
    S = probe.zeta.shape[:-1]
    vals = probe_values(probe)
    th0 = B.theta(probe.zeta)
    # reference frame at the probe points
    U_ref = []
    for i in range(len(probe.t)):
        G = B.levi_matrix(th0[i : i + 1], probe.z[i : i + 1])[0]
        w, V = np.linalg.eigh(G)
        U_ref.append(V[:, B.k :])
    U_ref = np.array(U_ref)
    nA = n - B.k
    # left sides by jets in zetabar
    inner = [("zetabar", i) for i in range(n)]
    v = seed(vals, inner)
    th = B.theta(v["zeta"], v["zetabar"])
    f, fbar = smooth_frame(B, th, v["z"], v["zbar"], U_ref)
    wb = v["zetabar"] - v["zbar"]
    Abar = (f * wb.expand(-1)).sum(-2)  # (S, nA): sum_i f_ij wbar_i
    Qj = B.Q(th, v["zeta"] - v["z"], v["z"], v["zbar"])
    # theta derivatives of the frame by real jets in theta
    dth = np.moveaxis(th.c[1:, 0], 0, -1)  # (S, m, n): d theta_k / d zetabar_i
    thv = th0
    ths = Jet.seed(thv.astype(complex), d1=np.moveaxis(np.broadcast_to(np.eye(m), S + (m, m)), -1, 0))
    vz = seed({"z": probe.z, "zbar": np.conj(probe.z)})
    f_t, _ = smooth_frame(B, ths, vz["z"], vz["zbar"], U_ref)
    df = np.moveaxis(f_t.c[1:, 0], 0, -1)  # (S, n, nA, m)
    wbv = np.conj(probe.zeta - probe.z)
    mu_tau = np.moveaxis(f.val, -1, -2)  # (S, nA, n): coefficient of dzetabar_i is f_ij
    mu_nu = np.einsum("si,sijk,skl->sjl", wbv, df, dth)
    lhs = np.moveaxis(Abar.c[1:, 0], 0, -1)  # (S, nA, n)
    res_A = np.abs(lhs - mu_tau - mu_nu).max() if nA else 0.0
    H2 = eval_matrix(B.M.rho2_holo, probe.z)
    H2w = np.einsum("sij,sj->si", H2, probe.zeta - probe.z)
    chi = -0.5 * np.einsum("si,skl->skil", H2w, dth)  # (S, m, n, n): d/dzetabar_l of Q^(k)_i
    lhsQ = np.moveaxis(Qj.c[1:, 0], 0, -1)
    res_Q = np.abs(lhsQ - chi).max()
    return {
        "residual_A": float(res_A),
        "residual_Q": float(res_Q),
        "mu_nu_max": float(np.abs(mu_nu).max()) if nA else 0.0,
        "chi_max": float(np.abs(chi).max()),
        "mu_tau_max": float(np.abs(mu_tau).max()) if nA else 0.0,
    }
