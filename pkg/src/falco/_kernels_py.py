"""Pure-numpy REML kernels; fallback for the compiled ``_kernels`` module.

All functions take reduced bases ``Bt`` of shape (b, m, m).  The objective is
``f(theta) = -log|V| - tr(S V^-1)`` with ``V = sum_j theta_j Bt_j``.
"""

import numpy as np
import scipy.linalg

_cholesky = scipy.linalg.cholesky
_solve_tri = scipy.linalg.solve_triangular
_lapack_potri = scipy.linalg.lapack.dpotri


def _inverse_from_chol(L):
    inv, info = _lapack_potri(L, lower=1)
    if info != 0:  # pragma: no cover - potrf succeeded, so potri cannot fail
        raise np.linalg.LinAlgError("potri failed")
    return np.tril(inv) + np.tril(inv, -1).T


def reml_value_grad(theta, Bt, St):
    V = np.tensordot(theta, Bt, axes=1)
    try:
        L = _cholesky(V, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return -np.inf, np.full(Bt.shape[0], np.nan)
    Vinv = _inverse_from_chol(L)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    T = Vinv @ St
    quad = np.trace(T)
    R = T @ Vinv - Vinv
    grad = np.tensordot(Bt, R, axes=([1, 2], [0, 1]))
    return -logdet - quad, grad


def reml_value_grad_vec(theta, Bt, y):
    V = np.tensordot(theta, Bt, axes=1)
    try:
        L = _cholesky(V, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return -np.inf, np.full(Bt.shape[0], np.nan)
    Vinv = _inverse_from_chol(L)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    u = Vinv @ y
    quad = float(y @ u)
    grad = np.einsum("jkl,k,l->j", Bt, u, u) - np.tensordot(Bt, Vinv, axes=([1, 2], [0, 1]))
    return -logdet - quad, grad


def reml_information(theta, Bt):
    """Matrix with entries tr(V^-1 B_i V^-1 B_j)."""
    V = np.tensordot(theta, Bt, axes=1)
    L = _cholesky(V, lower=True, check_finite=False)
    b, m, _ = Bt.shape
    W = np.empty_like(Bt)
    for j in range(b):
        X = _solve_tri(L, Bt[j], lower=True, check_finite=False)
        W[j] = _solve_tri(L, X.T, lower=True, check_finite=False)
    flat = W.reshape(b, m * m)
    return flat @ flat.T


def feasible(theta, B, lower, upper):
    """True when V(theta) - lower*I is PD and (upper <= 0 or upper*I - V is PD)."""
    V = np.tensordot(theta, B, axes=1)
    n = V.shape[0]
    idx = np.arange(n)
    A = V.copy()
    A[idx, idx] -= lower
    try:
        _cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return False
    if upper > 0:
        A = -V
        A[idx, idx] += upper
        try:
            _cholesky(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return False
    return True
