"""Polynomials in the Wirtinger variables (zeta, conj(zeta)).

A real polynomial in ``x_1..x_n, y_1..y_n`` is rewritten through
``x = (zeta + zetabar)/2`` and ``y = (zeta - zetabar)/(2i)`` as a complex
polynomial ``sum c[a,b] zeta^a zetabar^b``.  Wirtinger derivatives are then
exact coefficient operations.
"""

from __future__ import annotations

from collections import defaultdict
from math import comb

import numpy as np

from .jet import Jet

_TOL = 1e-15


class Poly:
    """Sparse polynomial ``{(alpha, beta): coeff}`` over ``n`` variables."""

    __slots__ = ("n", "terms")

    def __init__(self, n, terms=None):
        self.n = n
        self.terms = {}
        for k, v in (terms or {}).items():
            if v != 0:
                self.terms[(tuple(k[0]), tuple(k[1]))] = complex(v)

    # ------------------------------------------------------------ builders
    @classmethod
    def const(cls, n, c):
        z = (0,) * n
        return cls(n, {(z, z): c})

    @classmethod
    def var(cls, n, j, conj=False):
        e = [0] * n
        e[j] = 1
        z = (0,) * n
        key = (z, tuple(e)) if conj else (tuple(e), z)
        return cls(n, {key: 1.0})

    @classmethod
    def x(cls, n, j):
        return (cls.var(n, j) + cls.var(n, j, True)) * 0.5

    @classmethod
    def y(cls, n, j):
        return (cls.var(n, j) - cls.var(n, j, True)) * (-0.5j)

    @classmethod
    def from_real_terms(cls, n, terms):
        """Build from ``[{"coeff": c, "exponents": [e_x1..e_xn, e_y1..e_yn]}]``."""
        out = cls(n)
        xs = [cls.x(n, j) for j in range(n)]
        ys = [cls.y(n, j) for j in range(n)]
        for t in terms:
            e = list(t["exponents"])
            if len(e) != 2 * n:
                raise ValueError(f"exponent list of length {len(e)}, expected {2 * n}")
            mono = cls.const(n, float(t["coeff"]))
            for j in range(n):
                if e[j]:
                    mono = mono * xs[j] ** e[j]
                if e[n + j]:
                    mono = mono * ys[j] ** e[n + j]
            out = out + mono
        return out.clean()

    # ------------------------------------------------------------ algebra
    def clean(self, tol=_TOL):
        scale = max([abs(v) for v in self.terms.values()] + [1.0])
        return Poly(self.n, {k: v for k, v in self.terms.items() if abs(v) > tol * scale})

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(self.n, other)
        t = defaultdict(complex, self.terms)
        for k, v in other.terms.items():
            t[k] += v
        return Poly(self.n, t)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.n, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly(self.n, {k: v * other for k, v in self.terms.items()})
        t = defaultdict(complex)
        for (a1, b1), v1 in self.terms.items():
            for (a2, b2), v2 in other.terms.items():
                key = (
                    tuple(i + j for i, j in zip(a1, a2)),
                    tuple(i + j for i, j in zip(b1, b2)),
                )
                t[key] += v1 * v2
        return Poly(self.n, t)

    __rmul__ = __mul__

    def __pow__(self, p):
        out = Poly.const(self.n, 1.0)
        base = self
        while p:
            if p & 1:
                out = out * base
            base = base * base
            p >>= 1
        return out

    def conj(self):
        """Complex conjugate polynomial (swap the roles of zeta and zetabar)."""
        return Poly(self.n, {(b, a): np.conj(v) for (a, b), v in self.terms.items()})

    def is_real(self, tol=1e-12):
        d = self - self.conj()
        return all(abs(v) < tol for v in d.terms.values())

    def degree(self):
        return max((sum(a) + sum(b) for a, b in self.terms), default=0)

    def d_zeta(self, j):
        t = {}
        for (a, b), v in self.terms.items():
            if a[j]:
                a2 = list(a)
                a2[j] -= 1
                t[(tuple(a2), b)] = v * a[j]
        return Poly(self.n, t)

    def d_zetabar(self, j):
        t = {}
        for (a, b), v in self.terms.items():
            if b[j]:
                b2 = list(b)
                b2[j] -= 1
                t[(a, tuple(b2))] = v * b[j]
        return Poly(self.n, t)

    def gradient(self):
        return [self.d_zeta(j) for j in range(self.n)]

    def gradient_bar(self):
        return [self.d_zetabar(j) for j in range(self.n)]

    def compose(self, zeta_polys, zetabar_polys):
        """Substitute polynomials for each zeta_j and zetabar_j."""
        out = Poly(self.n)
        cache = {}

        def pw(p, k, key):
            if (key, k) not in cache:
                cache[(key, k)] = p**k
            return cache[(key, k)]

        for (a, b), v in self.terms.items():
            mono = Poly.const(self.n, v)
            for j in range(self.n):
                if a[j]:
                    mono = mono * pw(zeta_polys[j], a[j], ("z", j))
                if b[j]:
                    mono = mono * pw(zetabar_polys[j], b[j], ("zb", j))
            out = out + mono
        return out.clean()

    def to_real_terms(self):
        """Inverse of :meth:`from_real_terms` for real polynomials."""
        n = self.n
        out = defaultdict(float)
        for (a, b), v in self.terms.items():
            # zeta^a zetabar^b = prod (x+iy)^a (x-iy)^b
            parts = [{(0,) * (2 * n): complex(v)}]
            for j in range(n):
                nxt = defaultdict(complex)
                for p in range(a[j] + 1):
                    for s in range(b[j] + 1):
                        cx = comb(a[j], p) * comb(b[j], s)
                        ey = (a[j] - p) + (b[j] - s)
                        c = cx * (1j) ** (a[j] - p) * (-1j) ** (b[j] - s)
                        for key, val in parts[-1].items():
                            k2 = list(key)
                            k2[j] += p + s
                            k2[n + j] += ey
                            nxt[tuple(k2)] += val * c
                parts.append(nxt)
            for key, val in parts[-1].items():
                out[key] += val.real
        return [{"coeff": c, "exponents": list(k)} for k, c in sorted(out.items()) if abs(c) > _TOL]

    # ------------------------------------------------------------ evaluation
    def __call__(self, zeta, zetabar=None):
        return self.evaluate(zeta, zetabar)

    def evaluate(self, zeta, zetabar=None):
        """Evaluate at ``zeta`` with independent ``zetabar``.

        ``zeta`` is an array whose last axis has length ``n`` or a sequence of
        ``n`` per-coordinate values (arrays or :class:`Jet`).  When
        ``zetabar`` is omitted it is ``conj(zeta)`` (arrays only).
        """
        zs = _split(zeta, self.n)
        if zetabar is None:
            zbs = [np.conj(v) for v in zs]
        else:
            zbs = _split(zetabar, self.n)
        if not self.terms:
            return _zero_like(zs[0])
        pz = [_powers(zs[j], max(a[j] for a, _ in self.terms)) for j in range(self.n)]
        pb = [_powers(zbs[j], max(b[j] for _, b in self.terms)) for j in range(self.n)]
        out = None
        for (a, b), v in self.terms.items():
            mono = None
            for j in range(self.n):
                if a[j]:
                    mono = pz[j][a[j]] if mono is None else mono * pz[j][a[j]]
                if b[j]:
                    mono = pb[j][b[j]] if mono is None else mono * pb[j][b[j]]
            term = v if mono is None else mono * v
            out = term if out is None else out + term
        if not isinstance(out, Jet):
            out = out + _zero_like(zs[0])
        return out

    def __repr__(self):
        return f"Poly(n={self.n}, terms={len(self.terms)})"


def _split(v, n):
    if isinstance(v, (list, tuple)):
        if len(v) != n:
            raise ValueError("wrong number of coordinates")
        return list(v)
    if isinstance(v, Jet):
        return [v[..., j] for j in range(n)]
    v = np.asarray(v, dtype=complex)
    return [v[..., j] for j in range(n)]


def _zero_like(v):
    if isinstance(v, Jet):
        return Jet(np.zeros_like(v.c))
    return np.zeros(np.shape(v), dtype=complex)


def _powers(v, k):
    out = [None, v]
    for _ in range(2, k + 1):
        out.append(out[-1] * v)
    return out


def hessian_holo(p):
    """Matrix of polynomials ``d^2 p / dzeta_i dzeta_j``."""
    g = p.gradient()
    return [[g[i].d_zeta(j) for j in range(p.n)] for i in range(p.n)]


def hessian_mixed(p):
    """Matrix of polynomials ``d^2 p / dzeta_i dzetabar_j``."""
    g = p.gradient()
    return [[g[i].d_zetabar(j) for j in range(p.n)] for i in range(p.n)]


def eval_matrix(polys, zeta, zetabar=None):
    """Evaluate a nested list of polynomials into an array (or jet) with the
    matrix axes last."""
    from .jet import stack

    rows = []
    for row in polys:
        vals = [p.evaluate(zeta, zetabar) for p in row]
        if any(isinstance(v, Jet) for v in vals):
            rows.append(stack(vals, axis=-1))
        else:
            rows.append(np.stack(vals, axis=-1))
    if any(isinstance(r, Jet) for r in rows):
        return stack(rows, axis=-2)
    return np.stack(rows, axis=-2)


def eval_vector(polys, zeta, zetabar=None):
    from .jet import stack

    vals = [p.evaluate(zeta, zetabar) for p in polys]
    if any(isinstance(v, Jet) for v in vals):
        return stack(vals, axis=-1)
    return np.stack(vals, axis=-1)
