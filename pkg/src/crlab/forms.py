"""Exterior algebra in the variable groups (zeta, z, t) and Cauchy-Fantappie
forms.

Differentials carry integer labels with the fixed order

    dzetabar_1..n  <  dzbar_1..n  <  dt  <  dzeta_1..n

so a monomial is a strictly increasing label tuple.  Holomorphic
differentials in ``z`` are not represented.

Forms on ``M`` live in graph parameters ``(Y, W)`` with labels ``dY_k``,
``dW_j`` and ``dWbar_j`` (and ``dX_k``, which only exists to be rejected by
:func:`extend`).
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from math import factorial

import numpy as np

from . import jet as J
from .errors import BadCoordinateFrame, DegreeOutOfRange, LerayViolation, OutOfChart
from .jet import Jet
from .kernels import det_jet


# ---------------------------------------------------------------------------
# labels


def lab_zetabar(n, i):
    return i


def lab_zbar(n, i):
    return n + i


def lab_t(n):
    return 2 * n


def lab_zeta(n, i):
    return 2 * n + 1 + i


def label_name(n, lab):
    if lab < n:
        return f"dzetabar{lab + 1}"
    if lab < 2 * n:
        return f"dzbar{lab - n + 1}"
    if lab == 2 * n:
        return "dt"
    return f"dzeta{lab - 2 * n}"


def label_variable(n, lab):
    """``(variable, index)`` whose differential the label denotes."""
    if lab < n:
        return ("zetabar", lab)
    if lab < 2 * n:
        return ("zbar", lab - n)
    if lab == 2 * n:
        return ("t", 0)
    return ("zeta", lab - 2 * n - 1)


def normalize(labels):
    """Sort a label sequence; return ``(sign, sorted tuple)`` or ``(0, None)``
    when a label repeats."""
    labels = list(labels)
    if len(set(labels)) != len(labels):
        return 0, None
    sign = 1
    # insertion sort counting transpositions
    for i in range(1, len(labels)):
        j = i
        while j > 0 and labels[j - 1] > labels[j]:
            labels[j - 1], labels[j] = labels[j], labels[j - 1]
            sign = -sign
            j -= 1
    return sign, tuple(labels)


class GradedForm:
    """Sparse form ``sum_I c_I de_I`` over strictly increasing label tuples.

    Coefficients are scalars, arrays (batched over probes) or jets.
    """

    __slots__ = ("n", "terms")

    def __init__(self, n, terms=None):
        self.n = n
        self.terms = dict(terms or {})

    @classmethod
    def monomial(cls, n, labels, coeff=1.0):
        s, key = normalize(labels)
        if s == 0:
            return cls(n)
        return cls(n, {key: s * coeff if not isinstance(coeff, Jet) else coeff * s})

    @classmethod
    def scalar(cls, n, coeff):
        return cls(n, {(): coeff})

    def __add__(self, other):
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out[k] + v if k in out else v
        return GradedForm(self.n, out)

    def __sub__(self, other):
        return self + other * -1.0

    def __mul__(self, c):
        return GradedForm(self.n, {k: v * c for k, v in self.terms.items()})

    __rmul__ = __mul__

    def wedge(self, other):
        return wedge(self, other)

    def degree_part(self, pred):
        return GradedForm(self.n, {k: v for k, v in self.terms.items() if pred(k)})

    def zbar_degree(self, key):
        return sum(1 for lab in key if self.n <= lab < 2 * self.n)

    def without_dzeta(self):
        """Drop monomials containing holomorphic ``dzeta`` (they vanish after
        wedging with ``omega(zeta)``)."""
        return self.degree_part(lambda k: all(lab <= 2 * self.n for lab in k))

    def bidegree_part(self, r):
        """Monomials of degree exactly ``r`` in ``dzbar``."""
        return self.degree_part(lambda k: self.zbar_degree(k) == r)

    def max_abs(self):
        vals = [np.max(np.abs(J.value(v))) for v in self.terms.values()]
        return float(max(vals, default=0.0))

    def values(self):
        """Same form with jet coefficients replaced by their values."""
        return GradedForm(self.n, {k: J.value(v) for k, v in self.terms.items()})

    def names(self):
        return {" ^ ".join(label_name(self.n, lab) for lab in k) or "1": v for k, v in self.terms.items()}

    def __repr__(self):
        return f"GradedForm(n={self.n}, terms={len(self.terms)})"


def wedge(a, b):
    """Exterior product; signs by merge count."""
    out = {}
    for ka, va in a.terms.items():
        for kb, vb in b.terms.items():
            s, key = normalize(ka + kb)
            if s == 0:
                continue
            v = va * vb
            v = v * s if s != 1 else v
            out[key] = out[key] + v if key in out else v
    return GradedForm(a.n, out)


def difference(a, b):
    """``a - b`` as a form (missing monomials count as zero)."""
    return a + b * -1.0


def omega_zeta(n):
    """``omega(zeta) = dzeta_1 ^ ... ^ dzeta_n``."""
    return GradedForm.monomial(n, [lab_zeta(n, i) for i in range(n)])


# ---------------------------------------------------------------------------
# probes and jet seeding


@dataclass
class Probe:
    """Evaluation points: ``zeta`` and ``z`` of shape (S, n), ``t`` of shape (S,)."""

    zeta: np.ndarray
    z: np.ndarray
    t: np.ndarray

    @property
    def n(self):
        return self.zeta.shape[-1]

    @classmethod
    def random(cls, rng, count, n, z_radius=0.3, dist=(0.2, 0.6), z_points=None):
        if z_points is None:
            z = (rng.normal(size=(count, n)) + 1j * rng.normal(size=(count, n))) * z_radius / np.sqrt(2 * n)
        else:
            z = z_points
        d = rng.normal(size=(count, n)) + 1j * rng.normal(size=(count, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d *= rng.uniform(*dist, size=(count, 1))
        return cls(zeta=z + d, z=z, t=rng.random(count))


VARIABLES = ("zeta", "zetabar", "z", "zbar", "t")


def seed(values, inner=(), outer=()):
    """Seed jets for the named variables.

    ``values`` maps a variable name to an array of shape (S, dim) (or (S,)
    for scalars); ``inner`` and ``outer`` are lists of ``(name, index)``
    directions.  Returns a dict of jets.
    """
    out = {}
    k1, k2 = len(inner), len(outer)
    for name, v in values.items():
        v = np.asarray(v, dtype=complex)
        c = np.zeros((1 + k1, 1 + k2) + v.shape, dtype=complex)
        c[0, 0] = v
        for a, (nm, i) in enumerate(inner):
            if nm == name:
                if v.ndim == 1 or name == "t":
                    c[1 + a, 0] = 1.0
                else:
                    c[1 + a, 0, ..., i] = 1.0
        for b, (nm, i) in enumerate(outer):
            if nm == name:
                if v.ndim == 1 or name == "t":
                    c[0, 1 + b] = 1.0
                else:
                    c[0, 1 + b, ..., i] = 1.0
        out[name] = Jet(c)
    return out


def probe_values(probe):
    return {
        "zeta": probe.zeta,
        "zetabar": np.conj(probe.zeta),
        "z": probe.z,
        "zbar": np.conj(probe.z),
        "t": probe.t,
    }


# ---------------------------------------------------------------------------
# Leray sections


class LeraySection:
    """A map ``eta(zeta, z, t)`` with ``sum eta_k (zeta_k - z_k) = 1``.

    ``fn`` receives a dict of jets (``zeta``, ``zetabar``, ``z``, ``zbar`` of
    shape (S, n) and ``t`` of shape (S,)) and returns a jet of shape (S, n).
    ``zeta`` and ``zetabar`` are independent inputs, so ``fn`` must never
    conjugate a jet.
    """

    def __init__(self, n, fn, name="section", tol=1e-10):
        self.n = n
        self.fn = fn
        self.name = name
        self.tol = tol
        self._last = None

    def jet(self, probe, inner=(), outer=()):
        # one-entry cache: the graded parts of omega' reuse the same jet
        key = (tuple(inner), tuple(outer))
        if self._last is not None and self._last[0] is probe and self._last[1] == key:
            return self._last[2]
        v = seed(probe_values(probe), inner, outer)
        out = J.as_jet(self.fn(v))
        self._last = (probe, key, out)
        return out

    def value(self, probe):
        return self.jet(probe).val

    def leray_residual(self, probe):
        eta = self.value(probe)
        return np.abs(np.sum(eta * (probe.zeta - probe.z), axis=-1) - 1.0)

    def check(self, probe):
        res = self.leray_residual(probe)
        if res.max() > self.tol:
            raise LerayViolation(f"Leray condition violated: residual {res.max():.2e}")
        return float(res.max())

    def scaled(self, lam):
        return LeraySection(self.n, lambda v: self.fn(v) * lam, name=f"{lam}*{self.name}", tol=self.tol)


def bm_eta(v):
    w = v["zeta"] - v["z"]
    wb = v["zetabar"] - v["zbar"]
    r2 = (w * wb).sum(-1)
    return wb / r2.expand(-1)


def bochner_martinelli(n):
    """Bochner-Martinelli section ``conj(zeta - z) / |zeta - z|^2``."""
    return LeraySection(n, bm_eta, name="bochner-martinelli")


def convex_section(s0, s1):
    """``(1 - t) s0 + t s1``; a Leray section when both ends are."""

    def fn(v):
        t = v["t"].expand(-1)
        return s0.fn(v) * (1 - t) + s1.fn(v) * t

    return LeraySection(s0.n, fn, name=f"interp({s0.name},{s1.name})")


# ---------------------------------------------------------------------------
# Cauchy-Fantappie forms


class FormField:
    """Lazy form-valued field.

    ``evaluator(probe, outer)`` returns a :class:`GradedForm`; with a
    non-empty ``outer`` list its coefficients are jets in those directions.
    ``max_degree`` bounds the total degree.
    """

    def __init__(self, n, evaluator, max_degree=None, name="form"):
        self.n = n
        self.evaluator = evaluator
        self.max_degree = max_degree
        self.name = name

    def evaluate(self, probe, outer=()):
        f = self.evaluator(probe, list(outer))
        if self.max_degree is not None:
            for k in f.terms:
                assert len(k) <= self.max_degree
        return f


def differential_labels(n, holomorphic=True):
    labs = [lab_zetabar(n, i) for i in range(n)] + [lab_zbar(n, i) for i in range(n)] + [lab_t(n)]
    if holomorphic:
        labs += [lab_zeta(n, i) for i in range(n)]
    return labs


def _inner_dirs(n, labels):
    return [label_variable(n, lab) for lab in labels]


def _coeff(jetv, outer):
    """Turn a jet with k1 = 0 into an array (no outer) or an outer jet."""
    return jetv if outer else jetv.val


def omega_prime(section, holomorphic=True, check=True):
    """``omega'(eta) = sum_k (-1)^(k-1) eta_k  wedge_{j != k} d eta_j``.

    Built literally from wedge products of the one-forms ``d eta_j``
    expanded over ``dzeta``, ``dzetabar``, ``dzbar`` and ``dt``.
    """
    n = section.n

    def ev(probe, outer):
        if check:
            section.check(probe)
        labs = differential_labels(n, holomorphic)
        eta = section.jet(probe, _inner_dirs(n, labs), outer)
        d = []
        for j in range(n):
            terms = {}
            for a, lab in enumerate(labs):
                cj = Jet(eta.c[1 + a : 2 + a, :, ..., j])
                terms[(lab,)] = _coeff(cj, outer)
            d.append(GradedForm(n, terms))
        total = GradedForm(n)
        for k in range(n):
            ek = _coeff(Jet(eta.c[:1, :, ..., k]), outer)
            f = GradedForm.scalar(n, ek * (-1.0) ** k)
            for j in range(n):
                if j != k:
                    f = wedge(f, d[j])
            total = total + f
        return total

    return FormField(n, ev, max_degree=n - 1, name=f"omega'({section.name})")


def omega_prime_r(section, r, with_t=True, check=True):
    """Bidegree-``r`` component by the determinant formula

        omega'_r = 1/((n-r-1)! r!) Det[eta, dbar_z eta (r cols), dbar_{zeta,t} eta (n-r-1 cols)]

    The exterior determinant equals ``(n-r-1)! r!`` times the sum over
    increasing index sets of ordinary determinants, so coefficient of
    ``dzbar_K ^ e_L`` is ``det[eta, D_zbar[:, K], D_{zetabar,t}[:, L]]``.
    """
    n = section.n
    if not 0 <= r <= n - 1:
        raise DegreeOutOfRange(f"r={r} outside 0..{n - 1}")

    def ev(probe, outer):
        if check:
            section.check(probe)
        zl = [lab_zbar(n, i) for i in range(n)]
        cl = [lab_zetabar(n, i) for i in range(n)] + ([lab_t(n)] if with_t else [])
        # same seeding order as omega_prime so the section jet can be shared
        labs = cl[:n] + zl + cl[n:]
        pos_z = [1 + n + k for k in range(n)]
        pos_c = [1 + l for l in range(n)] + [1 + 2 * n] * with_t
        eta = section.jet(probe, _inner_dirs(n, labs), outer)
        S = probe.zeta.shape[:-1]
        k2 = len(outer)
        # column arrays: value part and outer derivatives
        cols_v = np.moveaxis(eta.c[:, 0], 0, -1)  # (S, n, 1+K1)
        cols_d = np.moveaxis(eta.c[:, 1:], 0, -1) if k2 else None  # (K2, S, n, 1+K1)
        out = {}
        for K in itertools.combinations(range(n), r):
            for L in itertools.combinations(range(len(cl)), n - r - 1):
                idx = [0] + [pos_z[k] for k in K] + [pos_c[l] for l in L]
                mv = cols_v[..., idx]
                md = np.moveaxis(cols_d[..., idx], 0, -3) if k2 else None
                dv, dd = det_jet(mv.reshape((-1, n, n)), None if md is None else md.reshape((-1, k2, n, n)))
                key = tuple(zl[k] for k in K) + tuple(cl[l] for l in L)
                s, nk = normalize(key)
                if k2:
                    c = np.zeros((1, 1 + k2) + S, dtype=complex)
                    c[0, 0] = dv.reshape(S)
                    c[0, 1:] = np.moveaxis(dd.reshape(S + (k2,)), -1, 0)
                    out[nk] = Jet(c * s)
                else:
                    out[nk] = dv.reshape(S) * s
        return GradedForm(n, out)

    return FormField(n, ev, max_degree=n - 1, name=f"omega'_{r}({section.name})")


SPLIT = {
    "d_t": lambda n: [("t", 0)],
    "dbar_zeta": lambda n: [("zetabar", i) for i in range(n)],
    "dbar_z": lambda n: [("zbar", i) for i in range(n)],
}


def split_derivative(F, which):
    """Exterior derivative in one variable group: ``sum_e de ^ d_e F``."""
    n = F.n
    dirs = SPLIT[which](n)

    def ev(probe, outer):
        if outer:
            raise NotImplementedError("nested split derivatives are not supported")
        f = F.evaluate(probe, dirs)
        total = GradedForm(n)
        for b, (nm, i) in enumerate(dirs):
            lab = {"t": lab_t(n), "zetabar": lab_zetabar(n, i), "zbar": lab_zbar(n, i)}[nm]
            part = GradedForm(n, {k: J.as_jet(v).c[0, 1 + b] for k, v in f.terms.items()})
            total = total + wedge(GradedForm.monomial(n, [lab]), part)
        return total

    return FormField(n, ev, name=f"{which}({F.name})")


def split_all(F, probe):
    """``F`` and its three split derivatives ``(d_t, dbar_zeta, dbar_z)`` from
    one evaluation with every direction seeded."""
    n = F.n
    groups = ("d_t", "dbar_zeta", "dbar_z")
    dirs = [d for w in groups for d in SPLIT[w](n)]
    f = F.evaluate(probe, dirs)
    value = GradedForm(n, {k: J.as_jet(v).c[0, 0] for k, v in f.terms.items()})
    out, b = [], 0
    for w in groups:
        total = GradedForm(n)
        for nm, i in SPLIT[w](n):
            lab = {"t": lab_t(n), "zetabar": lab_zetabar(n, i), "zbar": lab_zbar(n, i)}[nm]
            part = GradedForm(n, {k: J.as_jet(v).c[0, 1 + b] for k, v in f.terms.items()})
            total = total + wedge(GradedForm.monomial(n, [lab]), part)
            b += 1
        out.append(total)
    return value, out


def constant_form(n, form):
    """FormField returning a fixed form (coefficients broadcast over probes)."""

    def ev(probe, outer):
        S = probe.zeta.shape[:-1]
        terms = {}
        for k, v in form.terms.items():
            val = np.broadcast_to(np.asarray(v, complex), S).copy()
            terms[k] = Jet.const(val, 0, len(outer)) if outer else val
        return GradedForm(n, terms)

    return FormField(n, ev, name="const")


def field_from_function(n, fn, labels):
    """Field ``f(zeta, zetabar, z, zbar, t) de_labels`` (used in tests)."""

    def ev(probe, outer):
        v = seed(probe_values(probe), (), outer)
        c = J.as_jet(fn(v))
        return GradedForm.monomial(n, labels, c if outer else c.val)

    return FormField(n, ev, name="field")


def _rel(res, parts):
    """Largest residual coefficient over the largest summand coefficient."""
    scale = max((f.max_abs() for f in parts), default=0.0)
    return res.max_abs() / scale if scale > 0 else res.max_abs()


def kernel_identity_residuals(section, probe, chunk=500):
    """Residuals of the algebraic identities satisfied by a Leray section.

    Returns relative residuals (residual coefficient over the largest
    coefficient among the summands; for the graded identity, over all ``r``)
    for

    ``leray``
        ``sum eta_k (zeta_k - z_k) - 1`` (absolute),
    ``closed``
        ``d_t w + dbar_zeta w + dbar_z w`` with ``w = omega'(eta)`` modulo
        holomorphic differentials,
    ``graded``
        ``d_t w_r + dbar_zeta w_r + dbar_z w_(r-1)`` for ``r = 0..n``,
    ``sum``
        ``sum_r w_r - w``.
    """
    n = section.n
    parts = [omega_prime_r(section, r, with_t=True, check=False) for r in range(n)]
    full = omega_prime(section, holomorphic=False, check=False)
    out = {"leray": 0.0, "closed": 0.0, "graded": 0.0, "sum": 0.0}
    for s in range(0, len(probe.t), chunk):
        p = Probe(probe.zeta[s : s + chunk], probe.z[s : s + chunk], probe.t[s : s + chunk])
        out["leray"] = max(out["leray"], float(section.leray_residual(p).max()))
        wf, d = split_all(full, p)
        out["closed"] = max(out["closed"], _rel(d[0] + d[1] + d[2], d))
        split = [split_all(f, p) for f in parts]
        w = [x[0] for x in split]
        dt, dz, dzb = ([x[1][i] for x in split] for i in range(3))
        # one scale for all r: at r = 0 and r = n the lone summand is itself ~0
        scale = max(f.max_abs() for f in dt + dz + dzb) or 1.0
        for r in range(n + 1):
            terms = ([dt[r], dz[r]] if r < n else []) + ([dzb[r - 1]] if r > 0 else [])
            acc = GradedForm(n)
            for f in terms:
                acc = acc + f
            out["graded"] = max(out["graded"], acc.max_abs() / scale)
        total = GradedForm(n)
        for f in w:
            total = total + f
        out["sum"] = max(out["sum"], _rel(total - wf, [wf]))
    return out


# ---------------------------------------------------------------------------
# tangential Cauchy-Riemann frame


def cr_frame(M, z, zbar=None):
    """Columns ``Lbar_j`` (j = m..n-1) of the tangential (0,1) frame at points
    of ``M``: ``Lbar_j = d/dzbar_j + sum_{k<m} c_kj d/dzbar_k``.

    Returns ``V`` of shape (..., n, n-m) (array or jet) with ``V[k, j]`` the
    ``dzbar_k`` component of ``Lbar_{m+j}``.
    """
    n, m = M.n, M.m
    gb = M.jacobian_bar(z, zbar)  # (..., m, n)
    if isinstance(gb, Jet):
        B = gb[..., :m]
        A = gb[..., m:]
        c = -(B.inv() @ A)  # (..., m, n-m)
        eye = np.broadcast_to(np.eye(n - m, dtype=complex), c.shape[:-2] + (n - m, n - m))
        rows = [c[..., k, :] for k in range(m)] + [J.as_jet(eye[..., j, :]) for j in range(n - m)]
        return J.stack(rows, axis=-2)
    B = gb[..., :m]
    A = gb[..., m:]
    c = -np.linalg.solve(B, A)
    eye = np.broadcast_to(np.eye(n - m, dtype=complex), c.shape[:-2] + (n - m, n - m))
    return np.concatenate([c, eye], axis=-2)


def project_tangential(M, forms, V):
    """Evaluate (0,s) forms on the frame ``V``.

    ``forms`` maps increasing index tuples ``S`` over ``0..n-1`` to
    coefficients; the result maps tuples ``K`` over ``m..n-1`` to
    ``sum_S F_S det(V[S, K - m])``.
    """
    n, m = M.n, M.m
    out = {}
    if not forms:
        return out
    s = len(next(iter(forms)))
    for K in itertools.combinations(range(m, n), s):
        kk = [k - m for k in K]
        acc = None
        for S, val in forms.items():
            if isinstance(V, Jet):
                sub = V[..., list(S), :][..., kk]
                d = _det_small_jet(sub, s)
            else:
                sub = V[..., list(S), :][..., kk]
                d = np.linalg.det(sub) if s else 1.0
            term = val * d
            acc = term if acc is None else acc + term
        out[K] = acc
    return out


def _det_small_jet(A, s):
    """Determinant of a small jet matrix by Laplace expansion."""
    if s == 0:
        return 1.0
    if s == 1:
        return A[..., 0, 0]
    out = None
    for j in range(s):
        minor_cols = [c for c in range(s) if c != j]
        sub = A[..., 1:, :][..., minor_cols]
        term = A[..., 0, j] * _det_small_jet(sub, s - 1)
        term = term if j % 2 == 0 else -term
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# forms on M in graph parameters


class MForm:
    """Form on ``M`` in graph parameters.

    ``terms`` maps an increasing tuple of parameter labels to a coefficient
    callable ``f(Y, W, Wbar)``.  Labels: ``('Y', k)``, ``('W', j)``,
    ``('Wb', j)`` and ``('X', k)``; they sort in that group order.
    """

    ORDER = {"Y": 0, "W": 1, "Wb": 2, "X": 3}

    def __init__(self, chart, terms=None):
        self.chart = chart
        self.n, self.m = chart.n, chart.m
        self.terms = dict(terms or {})

    def key(self, lab):
        return (self.ORDER[lab[0]], lab[1])

    @classmethod
    def tangential(cls, chart, coeffs):
        """(0,r) form ``sum_K g_K dzbar_K`` with ``K`` over ``m..n-1``."""
        m = chart.m
        return cls(chart, {tuple(("Wb", k - m) for k in K): f for K, f in coeffs.items()})

    def is_tangential(self):
        return all(all(l[0] == "Wb" for l in k) for k in self.terms)

    def degree(self):
        return max((len(k) for k in self.terms), default=0)

    def tangential_coeffs(self):
        m = self.m
        return {tuple(m + l[1] for l in k): f for k, f in self.terms.items()}

    def evaluate(self, Y, W, Wbar=None):
        Wbar = np.conj(W) if Wbar is None else Wbar
        return {k: f(Y, W, Wbar) for k, f in self.terms.items()}

    def at_zeta(self, zeta):
        """Coefficients of the extension ``E(g)`` at ambient points."""
        m = self.m
        Y = zeta[..., :m].imag
        W = zeta[..., m:]
        return {k: f(Y, W, np.conj(W)) for k, f in self.terms.items()}

    def __add__(self, other):
        terms = dict(self.terms)
        for k, f in other.terms.items():
            if k in terms:
                g = terms[k]
                terms[k] = lambda Y, W, Wb, f=f, g=g: g(Y, W, Wb) + f(Y, W, Wb)
            else:
                terms[k] = f
        return MForm(self.chart, terms)

    def scale(self, a):
        return MForm(self.chart, {k: (lambda Y, W, Wb, f=f: f(Y, W, Wb) * a) for k, f in self.terms.items()})


def _mform_normalize(form, labels):
    keyed = sorted(range(len(labels)), key=lambda i: form.key(labels[i]))
    if len(set(labels)) != len(labels):
        return 0, None
    s, _ = normalize([form.key(l) for l in labels])
    return s, tuple(labels[i] for i in keyed)


@dataclass
class AmbientForm:
    """Form in ``zeta`` with callable coefficients ``f(zeta, zetabar)``.

    Keys are increasing tuples of labels (``dzetabar_i`` and ``dzeta_i`` in
    the global label order).
    """

    n: int
    terms: dict

    @classmethod
    def dx(cls, n, k):
        return cls(n, {(lab_zetabar(n, k),): _const(0.5), (lab_zeta(n, k),): _const(0.5)})

    @classmethod
    def dy(cls, n, k):
        return cls(n, {(lab_zetabar(n, k),): _const(0.5j), (lab_zeta(n, k),): _const(-0.5j)})

    @classmethod
    def d_poly(cls, p):
        """Exterior derivative of a polynomial function."""
        n = p.n
        terms = {}
        for i in range(n):
            gz, gb = p.d_zeta(i), p.d_zetabar(i)
            if gz.terms:
                terms[(lab_zeta(n, i),)] = lambda z, zb, g=gz: g.evaluate(z, zb)
            if gb.terms:
                terms[(lab_zetabar(n, i),)] = lambda z, zb, g=gb: g.evaluate(z, zb)
        return cls(n, terms)


def _const(c):
    return lambda z, zb: c


def extend(g):
    """Extension ``E(g)``: coefficients constant in ``x_1..x_m``.

    ``dY_k -> (dzeta_k - dzetabar_k) / (2i)``, ``dW_j -> dzeta_{m+j}``,
    ``dWbar_j -> dzetabar_{m+j}``.
    """
    n, m = g.n, g.m
    one_forms = {}
    for k in g.terms:
        for lab in k:
            if lab[0] == "X":
                raise BadCoordinateFrame("form contains dx factors; extension is defined for dy, dz, dzbar only")
    terms = defaultdict(list)
    for key, f in g.terms.items():
        # expand the product of ambient one-forms
        pieces = [((), 1.0)]
        for lab in key:
            kind, j = lab
            if kind == "Y":
                opts = [(lab_zeta(n, j), -0.5j), (lab_zetabar(n, j), 0.5j)]
            elif kind == "W":
                opts = [(lab_zeta(n, m + j), 1.0)]
            else:
                opts = [(lab_zetabar(n, m + j), 1.0)]
            pieces = [(p + (o,), c * oc) for p, c in pieces for o, oc in opts]
        for labs, c in pieces:
            s, nk = normalize(labs)
            if s:
                terms[nk].append((s * c, f))
    out = {}
    for nk, lst in terms.items():

        def coef(zeta, zetabar, lst=lst):
            Y, W, Wb = _params_from_zeta(m, zeta, zetabar)
            acc = None
            for c, f in lst:
                v = f(Y, W, Wb) * c
                acc = v if acc is None else acc + v
            return acc

        out[nk] = coef
    del one_forms
    return AmbientForm(n, out)


def _params_from_zeta(m, zeta, zetabar):
    if isinstance(zeta, Jet) or isinstance(zetabar, Jet):
        zj, zbj = J.as_jet(zeta), J.as_jet(zetabar)
        Y = (zj[..., :m] - zbj[..., :m]) * (-0.5j)
        return Y, zj[..., m:], zbj[..., m:]
    Y = ((zeta[..., :m] - zetabar[..., :m]) * (-0.5j)).real
    return Y, zeta[..., m:], zetabar[..., m:]


def restrict_to_M(F, chart):
    """Pull an ambient form back under ``(Y, W) -> (phi(Y, W) + iY, W)``.

    Returns an :class:`MForm` whose coefficients are evaluated lazily (with
    derivatives of ``phi`` from jets).  Raises :class:`OutOfChart` when
    evaluated outside the chart box.
    """
    n, m = chart.n, chart.m
    plabs = [("Y", k) for k in range(m)] + [("W", j) for j in range(n - m)] + [("Wb", j) for j in range(n - m)]
    template = MForm(chart)
    degrees = {len(k) for k in F.terms}
    out_keys = set()
    for d in degrees:
        for combo in itertools.combinations(plabs, d):
            out_keys.add(combo)

    cache = {}

    def pulled(Y, W, Wb):
        ident = (id(Y), id(W))
        if ident in cache:
            return cache[ident]
        Yv, Wv = np.asarray(J.value(Y)).real, J.value(W)
        if np.any(np.abs(Yv - chart.system.center[:m].imag) > chart.y_radius + 1e-12) or np.any(
            np.abs(Wv - chart.system.center[m:]) > chart.w_radius * np.sqrt(2) + 1e-12
        ):
            raise OutOfChart("parameter point outside the chart box")
        dirs = [("Y", k) for k in range(m)] + [("W", j) for j in range(n - m)] + [("Wb", j) for j in range(n - m)]
        v = seed({"Y": np.asarray(Yv, complex), "W": Wv, "Wb": np.conj(Wv)}, dirs)
        X = chart.phi(v["Y"], v["W"], v["Wb"])
        zeta = J.stack([(X + v["Y"] * 1j)[..., k] for k in range(m)] + [v["W"][..., j] for j in range(n - m)], -1)
        zetab = J.stack([(X - v["Y"] * 1j)[..., k] for k in range(m)] + [v["Wb"][..., j] for j in range(n - m)], -1)
        zv, zbv = zeta.val, zetab.val
        # one-forms d zeta_i, d zetabar_i in parameter differentials
        one = {}
        for i in range(n):
            for lab, jt in ((lab_zeta(n, i), zeta), (lab_zetabar(n, i), zetab)):
                one[lab] = {(dirs[a],): jt.c[1 + a, 0, ..., i] for a in range(len(dirs))}
        result = defaultdict(lambda: 0.0)
        for key, f in F.terms.items():
            coef = f(zv, zbv)
            # wedge of the pulled one-forms
            prod = {(): coef}
            for lab in key:
                nxt = defaultdict(lambda: 0.0)
                for pk, pv in prod.items():
                    for (ql,), qv in one[lab].items():
                        labels = list(pk) + [ql]
                        s, nk = _mform_normalize(template, labels)
                        if s:
                            nxt[nk] = nxt[nk] + s * pv * qv
                prod = nxt
            for k, vv in prod.items():
                result[k] = result[k] + vv
        cache.clear()
        cache[ident] = result
        return result

    terms = {k: (lambda Y, W, Wb, k=k: pulled(Y, W, Wb).get(k, 0.0 * np.asarray(J.value(Y))[..., 0])) for k in out_keys}
    return MForm(chart, terms)


def _wirtinger_derivatives(f, m, Y, W, Wb, nW):
    """Values and ``d/dzetabar_k`` (k = 0..n-1) of ``E(f)`` at a point of
    ``M``; inputs may carry outer jets."""
    Yj, Wj, Wbj = J.as_jet(Y), J.as_jet(W), J.as_jet(Wb)
    k2 = Yj.k2 or Wj.k2 or Wbj.k2
    n = m + nW
    K1 = n
    S = np.shape(J.value(Y))[:-1]

    def lift(x, dim, name):
        x = J.as_jet(x)
        c = np.zeros((1 + K1, 1 + k2) + S + (dim,), dtype=complex)
        c[0, : x.k2 + 1] = x.c[0]
        for k in range(n):
            if name == "Y" and k < m:
                c[1 + k, 0, ..., k] = 0.5j  # dY_k/dzetabar_k = i/2
            if name == "Wb" and k >= m:
                c[1 + k, 0, ..., k - m] = 1.0
        return Jet(c)

    val = J.as_jet(f(lift(Yj, m, "Y"), lift(Wj, nW, "W"), lift(Wbj, nW, "Wb")))
    if val.k1 == 0:
        val = Jet(np.concatenate([val.c, np.zeros((K1,) + val.c.shape[1:], complex)], axis=0))
    return val


def _swap_groups(x):
    if isinstance(x, Jet):
        return Jet(np.swapaxes(x.c, 0, 1))
    return x


def dbar_M(g):
    """Tangential Cauchy-Riemann operator ``r_M o dbar o E`` on (0,r) forms.

    The ambient ``dbar E(g)`` is evaluated on the frame ``Lbar_{m+1..n}``;
    the result is a tangential (0,r+1) :class:`MForm`.  Coefficients accept
    outer jets, so ``dbar_M`` may be applied twice.
    """
    if not g.is_tangential():
        raise BadCoordinateFrame("dbar_M expects a tangential (0,r) form")
    chart = g.chart
    n, m = g.n, g.m
    coeffs = g.tangential_coeffs()
    r = g.degree()
    M = chart.system

    def evaluate_all(Y, W, Wb):
        nW = n - m
        # a nested application arrives with derivatives in the inner group;
        # move them to the outer group for this level and back on exit
        nested = any(isinstance(x, Jet) and x.k1 and not x.k2 for x in (Y, W, Wb))
        if nested:
            Y, W, Wb = (_swap_groups(x) for x in (Y, W, Wb))
            res = _evaluate_level(Y, W, Wb)
            return {K: _swap_groups(v) for K, v in res.items()}
        return _evaluate_level(Y, W, Wb)

    def _evaluate_level(Y, W, Wb):
        nW = n - m
        # point of M (possibly as outer jet)
        if isinstance(Y, Jet) or isinstance(W, Jet):
            X = chart.phi(J.as_jet(Y), J.as_jet(W), J.as_jet(Wb))
            Yj = J.as_jet(Y)
            z = J.stack([(X + Yj * 1j)[..., k] for k in range(m)] + [J.as_jet(W)[..., j] for j in range(nW)], -1)
            zb = J.stack([(X - Yj * 1j)[..., k] for k in range(m)] + [J.as_jet(Wb)[..., j] for j in range(nW)], -1)
            V = cr_frame(M, z, zb)
        else:
            X = chart.phi(np.asarray(Y, float), W)
            z = np.concatenate([X + 1j * np.asarray(Y), W], -1)
            V = cr_frame(M, z)
        ambient = defaultdict(lambda: 0.0)
        for K, f in coeffs.items():
            jv = _wirtinger_derivatives(f, m, Y, W, Wb, nW)
            for k in range(n):
                if k in K:
                    continue
                d = Jet(jv.c[1 + k : 2 + k])
                d = d if d.k2 else d.val
                s, key = normalize((k,) + K)
                ambient[key] = ambient[key] + d * s
        return project_tangential(M, dict(ambient), V)

    out = {}
    for K in itertools.combinations(range(m, n), r + 1):
        out[K] = lambda Y, W, Wb, K=K: evaluate_all(Y, W, Wb)[K]
    return MForm.tangential(chart, out)
