"""Hot kernels: batched complex determinants with directional derivatives.

The compiled extension is used when it imports; otherwise a numpy
implementation with the same contract is selected.  ``BACKEND`` names the
active implementation.
"""

from __future__ import annotations

import os

import numpy as np


def _np_batched_det(M):
    return np.linalg.det(M)


def _np_cofactors(M):
    B, n, _ = M.shape
    if n == 1:
        return np.ones((B, 1, 1), dtype=complex)
    cof = np.empty_like(M)
    idx = np.arange(n)
    for i in range(n):
        rows = idx[idx != i]
        for j in range(n):
            cols = idx[idx != j]
            cof[:, i, j] = (-1) ** (i + j) * np.linalg.det(M[:, rows][:, :, cols])
    return cof


def _np_det_jet(M, dM):
    det = np.linalg.det(M)
    cof = _np_cofactors(M)
    return det, np.einsum("bij,bkij->bk", cof, dM)


numpy_kernels = {"batched_det": _np_batched_det, "det_jet": _np_det_jet}

try:
    if os.environ.get("CRLAB_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by CRLAB_PURE_PYTHON")
    from ._ext import _core

    compiled_kernels = {"batched_det": _core.batched_det, "det_jet": _core.det_jet}
    BACKEND = "compiled"
except ImportError:  # pragma: no cover - depends on the build
    compiled_kernels = None
    BACKEND = "numpy"

_active = compiled_kernels or numpy_kernels


def batched_det(M):
    """Determinants of a stack (B, n, n) of complex matrices."""
    M = np.ascontiguousarray(M, dtype=complex)
    if M.shape[0] == 0:
        return np.zeros(0, complex)
    return _active["batched_det"](M)


def det_jet(M, dM=None):
    """Determinants of (B, n, n) matrices and, if ``dM`` (B, K, n, n) is
    given, their derivatives along each of the ``K`` directions.

    Returns ``(det, ddet)`` with ``ddet`` of shape (B, K) or ``None``.
    """
    M = np.ascontiguousarray(M, dtype=complex)
    if dM is None:
        return batched_det(M), None
    dM = np.ascontiguousarray(dM, dtype=complex)
    if M.shape[0] == 0:
        return np.zeros(0, complex), np.zeros((0, dM.shape[1]), complex)
    return _active["det_jet"](M, dM)
