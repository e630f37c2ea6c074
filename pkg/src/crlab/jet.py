"""Vectorized forward-mode jets with two independent direction groups.

A :class:`Jet` carries, for every entry of an ndarray-valued quantity, its
value, the first derivatives along ``K1`` directions of the *inner* group,
the first derivatives along ``K2`` directions of the *outer* group and the
mixed second derivatives (inner x outer).  Pure second derivatives inside a
group are not tracked.

Coefficients live in one complex array ``c`` of shape ``(1+K1, 1+K2) + S``::

    c[0, 0]   value
    c[i, 0]   d/d(inner_i)
    c[0, j]   d/d(outer_j)
    c[i, j]   d^2/d(inner_i) d(outer_j)

Directions are arbitrary (real coordinate directions or Wirtinger
directions); no conjugation rule is built in, so callers that use Wirtinger
seeding must carry ``z`` and ``conj(z)`` as independent jets.
"""

from __future__ import annotations

import numpy as np


def _pad_to(c, ndim):
    """Insert singleton axes after the two derivative axes so ``c`` has
    ``2 + ndim`` dimensions."""
    extra = ndim - (c.ndim - 2)
    if extra <= 0:
        return c
    return c.reshape(c.shape[:2] + (1,) * extra + c.shape[2:])


def _grow(c, k1, k2):
    """Zero-pad derivative axes up to ``(1+k1, 1+k2)``."""
    a, b = c.shape[0] - 1, c.shape[1] - 1
    if a == k1 and b == k2:
        return c
    if (a not in (0, k1)) or (b not in (0, k2)):
        raise ValueError(f"incompatible jet groups ({a},{b}) vs ({k1},{k2})")
    out = np.zeros((1 + k1, 1 + k2) + c.shape[2:], dtype=c.dtype)
    out[: a + 1, : b + 1] = c
    return out


def _align(a, b):
    k1 = max(a.shape[0], b.shape[0]) - 1
    k2 = max(a.shape[1], b.shape[1]) - 1
    nd = max(a.ndim, b.ndim) - 2
    return _pad_to(_grow(a, k1, k2), nd), _pad_to(_grow(b, k1, k2), nd)


def _bilinear(a, b, op):
    a, b = _align(a, b)
    k1, k2 = a.shape[0] - 1, a.shape[1] - 1
    a0, b0 = a[0, 0], b[0, 0]
    c00 = op(a0, b0)
    out = np.zeros((1 + k1, 1 + k2) + c00.shape, dtype=np.result_type(c00, complex))
    out[0, 0] = c00
    if k1:
        out[1:, 0] = op(a[1:, 0], b0) + op(a0, b[1:, 0])
    if k2:
        out[0, 1:] = op(a[0, 1:], b0) + op(a0, b[0, 1:])
    if k1 and k2:
        out[1:, 1:] = (
            op(a[1:, 1:], b0)
            + op(a0, b[1:, 1:])
            + op(a[1:, 0][:, None], b[0, 1:][None, :])
            + op(a[0, 1:][None, :], b[1:, 0][:, None])
        )
    return out


def _chain(c, f0, f1, f2):
    """Apply a scalar function given its value and first two derivatives at
    the value part."""
    out = np.empty(c.shape, dtype=np.result_type(c, f0, complex))
    out[0, 0] = f0
    out[1:, 0] = f1 * c[1:, 0]
    out[0, 1:] = f1 * c[0, 1:]
    out[1:, 1:] = f1 * c[1:, 1:] + f2 * c[1:, 0][:, None] * c[0, 1:][None, :]
    return out


class Jet:
    """Array-valued jet; see the module docstring for the layout."""

    __slots__ = ("c",)
    __array_priority__ = 100

    def __init__(self, c):
        self.c = c

    # ------------------------------------------------------------ creation
    @classmethod
    def const(cls, value, k1=0, k2=0):
        value = np.asarray(value, dtype=complex)
        c = np.zeros((1 + k1, 1 + k2) + value.shape, dtype=complex)
        c[0, 0] = value
        return cls(c)

    @classmethod
    def seed(cls, value, d1=None, d2=None, d12=None):
        """Build a jet from a value and optional derivative arrays.

        ``d1`` has shape ``(K1,) + S``, ``d2`` has shape ``(K2,) + S``.
        """
        value = np.asarray(value, dtype=complex)
        k1 = 0 if d1 is None else len(d1)
        k2 = 0 if d2 is None else len(d2)
        c = np.zeros((1 + k1, 1 + k2) + value.shape, dtype=complex)
        c[0, 0] = value
        if k1:
            c[1:, 0] = d1
        if k2:
            c[0, 1:] = d2
        if d12 is not None:
            c[1:, 1:] = d12
        return cls(c)

    # ------------------------------------------------------------ accessors
    @property
    def val(self):
        return self.c[0, 0]

    @property
    def d1(self):
        return self.c[1:, 0]

    @property
    def d2(self):
        return self.c[0, 1:]

    @property
    def d12(self):
        return self.c[1:, 1:]

    @property
    def k1(self):
        return self.c.shape[0] - 1

    @property
    def k2(self):
        return self.c.shape[1] - 1

    @property
    def shape(self):
        return self.c.shape[2:]

    @property
    def ndim(self):
        return self.c.ndim - 2

    def outer_part(self):
        """Drop the inner group: a jet in the outer group only."""
        return Jet(self.c[:1].copy())

    def inner_derivative(self, i):
        """The inner derivative ``i`` as a jet in the outer group."""
        return Jet(self.c[1 + i : 2 + i].copy())

    def __repr__(self):
        return f"Jet(shape={self.shape}, k1={self.k1}, k2={self.k2})"

    # ------------------------------------------------------------ indexing
    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Jet(self.c[(slice(None), slice(None)) + idx])

    def __setitem__(self, idx, value):
        if not isinstance(idx, tuple):
            idx = (idx,)
        v = as_jet(value)
        c = _grow(v.c, self.k1, self.k2) if v.k1 <= self.k1 and v.k2 <= self.k2 else v.c
        self.c[(slice(None), slice(None)) + idx] = c

    def sum(self, axis=None):
        if axis is None:
            axis = tuple(range(self.ndim))
        elif isinstance(axis, int):
            axis = (axis,)
        axis = tuple((a % self.ndim) + 2 for a in axis)
        return Jet(self.c.sum(axis=axis))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.c.reshape(self.c.shape[:2] + tuple(shape)))

    def swapaxes(self, a, b):
        return Jet(np.swapaxes(self.c, a % self.ndim + 2, b % self.ndim + 2))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def expand(self, axis):
        return Jet(np.expand_dims(self.c, axis % (self.ndim + 1) + 2))

    # ------------------------------------------------------------ arithmetic
    def __neg__(self):
        return Jet(-self.c)

    def __add__(self, other):
        a, b = _align(self.c, as_jet(other).c)
        return Jet(a + b)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = _align(self.c, as_jet(other).c)
        return Jet(a - b)

    def __rsub__(self, other):
        a, b = _align(as_jet(other).c, self.c)
        return Jet(a - b)

    def __mul__(self, other):
        if np.isscalar(other):
            return Jet(self.c * other)
        return Jet(_bilinear(self.c, as_jet(other).c, np.multiply))

    def __rmul__(self, other):
        if np.isscalar(other):
            return Jet(self.c * other)
        return Jet(_bilinear(as_jet(other).c, self.c, np.multiply))

    def __truediv__(self, other):
        if np.isscalar(other):
            return Jet(self.c / other)
        return self * as_jet(other).reciprocal()

    def __rtruediv__(self, other):
        return as_jet(other) * self.reciprocal()

    def __pow__(self, p):
        if not isinstance(p, (int, np.integer)) or p < 0:
            v = self.val
            return Jet(_chain(self.c, v**p, p * v ** (p - 1), p * (p - 1) * v ** (p - 2)))
        out = Jet.const(np.ones(self.shape), self.k1, self.k2)
        base = self
        while p:
            if p & 1:
                out = out * base
            base = base * base
            p >>= 1
        return out

    def __matmul__(self, other):
        return Jet(_bilinear(self.c, as_jet(other).c, np.matmul))

    def __rmatmul__(self, other):
        return Jet(_bilinear(as_jet(other).c, self.c, np.matmul))

    def reciprocal(self):
        v = 1.0 / self.val
        return Jet(_chain(self.c, v, -v * v, 2.0 * v * v * v))

    def sqrt(self):
        s = np.sqrt(self.val)
        return Jet(_chain(self.c, s, 0.5 / s, -0.25 / (s * self.val)))

    def exp(self):
        e = np.exp(self.val)
        return Jet(_chain(self.c, e, e, e))

    def conj(self):
        """Coefficient-wise conjugate; correct for real seed directions only."""
        return Jet(self.c.conj())

    def real(self):
        """Coefficient-wise real part; correct for real seed directions only."""
        return Jet(self.c.real.astype(complex))

    def inv(self):
        """Matrix inverse over the last two axes."""
        a = self.c
        v = np.linalg.inv(a[0, 0])
        out = np.empty_like(a, dtype=complex)
        out[0, 0] = v
        k1, k2 = self.k1, self.k2
        if k1:
            out[1:, 0] = -v @ a[1:, 0] @ v
        if k2:
            out[0, 1:] = -v @ a[0, 1:] @ v
        if k1 and k2:
            inner = (
                a[1:, 1:] @ v
                + a[1:, 0][:, None] @ out[0, 1:][None, :]
                + a[0, 1:][None, :] @ out[1:, 0][:, None]
            )
            out[1:, 1:] = -v @ inner
        return Jet(out)


def as_jet(x):
    if isinstance(x, Jet):
        return x
    return Jet.const(x)


def value(x):
    """Value part of a jet, or the input itself."""
    return x.val if isinstance(x, Jet) else x


def stack(items, axis=0):
    """Stack jets (or constants) along a new value axis."""
    jets = [as_jet(i) for i in items]
    k1 = max(j.k1 for j in jets)
    k2 = max(j.k2 for j in jets)
    nd = max(j.ndim for j in jets)
    cs = [_pad_to(_grow(j.c, k1, k2), nd) for j in jets]
    shape = np.broadcast_shapes(*[c.shape[2:] for c in cs])
    cs = [np.broadcast_to(c, c.shape[:2] + shape) for c in cs]
    ax = axis % (nd + 1) + 2
    return Jet(np.stack(cs, axis=ax))


def sqrt(x):
    return x.sqrt() if isinstance(x, Jet) else np.sqrt(x)


def reciprocal(x):
    return x.reciprocal() if isinstance(x, Jet) else 1.0 / x


def inv(x):
    return x.inv() if isinstance(x, Jet) else np.linalg.inv(x)


def eye_like(x, n):
    """Identity matrix broadcastable against the batch shape of ``x``."""
    return np.eye(n, dtype=complex)


def matrix_sign(a, tol=1e-14, max_iter=100):
    """Matrix sign function by the scaled Newton iteration
    ``X <- (X + X^{-1}) / 2``; works on plain arrays and on jets.

    The matrix must have no eigenvalues on the imaginary axis.
    """
    x = a
    for it in range(max_iter):
        xv = value(x)
        xi = inv(x)
        # determinant scaling accelerates the early iterations
        if it < 5:
            d = np.abs(np.linalg.det(xv)) ** (1.0 / xv.shape[-1])
            mu = 1.0 / d
            mu = mu[(...,) + (None,) * 2] if np.ndim(mu) else mu
            x_new = 0.5 * (mu * x + xi * (1.0 / mu))
        else:
            x_new = 0.5 * (x + xi)
        delta = np.max(np.abs(value(x_new) - xv))
        x = x_new
        if it >= 5 and delta < tol:
            # derivative parts lag one or two steps behind the value
            for _ in range(2):
                x = 0.5 * (x + inv(x))
            return x
    raise ArithmeticError("matrix sign iteration did not converge")
