# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Batched complex determinants with first-order directional derivatives."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

ctypedef double complex cplx

cnp.import_array()


cdef inline double cabs1(cplx z) nogil:
    return fabs(z.real) + fabs(z.imag)


cdef cplx det_inplace(cplx* a, int n) nogil:
    """Determinant by Gaussian elimination with partial pivoting; destroys a."""
    cdef int i, j, k, p
    cdef cplx det = 1.0, f, tmp
    cdef double best, v
    for k in range(n):
        p = k
        best = cabs1(a[k * n + k])
        for i in range(k + 1, n):
            v = cabs1(a[i * n + k])
            if v > best:
                best = v
                p = i
        if best == 0.0:
            return 0.0
        if p != k:
            for j in range(n):
                tmp = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = tmp
            det = -det
        det = det * a[k * n + k]
        for i in range(k + 1, n):
            f = a[i * n + k] / a[k * n + k]
            if f != 0:
                for j in range(k + 1, n):
                    a[i * n + j] = a[i * n + j] - f * a[k * n + j]
    return det


def batched_det(cnp.ndarray[cplx, ndim=3] M):
    """Determinants of a stack of complex matrices (B, n, n)."""
    cdef Py_ssize_t B = M.shape[0], b
    cdef int n = M.shape[1], i, j
    cdef cnp.ndarray[cplx, ndim=1] out = np.empty(B, dtype=np.complex128)
    cdef cplx[:, :, ::1] Mv = np.ascontiguousarray(M)
    cdef cplx[::1] work = np.empty(n * n, dtype=np.complex128)
    with nogil:
        for b in range(B):
            for i in range(n):
                for j in range(n):
                    work[i * n + j] = Mv[b, i, j]
            out[b] = det_inplace(&work[0], n)
    return out


def det_jet(cnp.ndarray[cplx, ndim=3] M, cnp.ndarray[cplx, ndim=4] dM):
    """Determinant and its derivatives along ``dM`` (B, K, n, n).

    Derivatives use the cofactor identity ``d det = sum_ij C_ij dM_ij`` with
    cofactors from explicit minors, so singular matrices are handled.
    """
    cdef Py_ssize_t B = M.shape[0], b
    cdef int n = M.shape[1], K = dM.shape[1], i, j, r, c, rr, cc, k
    cdef cnp.ndarray[cplx, ndim=1] det = np.empty(B, dtype=np.complex128)
    cdef cnp.ndarray[cplx, ndim=2] dd = np.zeros((B, K), dtype=np.complex128)
    cdef cplx[:, :, ::1] Mv = np.ascontiguousarray(M)
    cdef cplx[:, :, :, ::1] dMv = np.ascontiguousarray(dM)
    cdef cplx[::1] work = np.empty(n * n, dtype=np.complex128)
    cdef cplx[::1] cof = np.empty(n * n, dtype=np.complex128)
    cdef cplx acc, s
    cdef int m1 = n - 1
    with nogil:
        for b in range(B):
            for i in range(n):
                for j in range(n):
                    work[i * n + j] = Mv[b, i, j]
            det[b] = det_inplace(&work[0], n)
            if n == 1:
                cof[0] = 1.0
            else:
                for i in range(n):
                    for j in range(n):
                        rr = 0
                        for r in range(n):
                            if r == i:
                                continue
                            cc = 0
                            for c in range(n):
                                if c == j:
                                    continue
                                work[rr * m1 + cc] = Mv[b, r, c]
                                cc = cc + 1
                            rr = rr + 1
                        s = det_inplace(&work[0], m1)
                        if (i + j) % 2 == 1:
                            s = -s
                        cof[i * n + j] = s
            for k in range(K):
                acc = 0
                for i in range(n):
                    for j in range(n):
                        acc = acc + cof[i * n + j] * dMv[b, k, i, j]
                dd[b, k] = acc
    return det, dd
