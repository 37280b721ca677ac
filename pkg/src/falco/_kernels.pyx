# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled REML kernels.  Same contract as ``falco._kernels_py``.

Buffers are C-contiguous; LAPACK sees them transposed, which is harmless
because every matrix factored or inverted here is symmetric.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY, NAN
from scipy.linalg.cython_lapack cimport dpotrf, dpotri
from scipy.linalg.cython_blas cimport dgemm, dtrsm

cnp.import_array()


cdef inline void _assemble(const double[::1] theta, const double[:, :, ::1] B,
                           double* out, int m) noexcept nogil:
    cdef int b = B.shape[0]
    cdef int i, k
    cdef double t
    cdef const double* pb
    for i in range(m * m):
        out[i] = 0.0
    for k in range(b):
        t = theta[k]
        if t == 0.0:
            continue
        pb = &B[k, 0, 0]
        for i in range(m * m):
            out[i] += t * pb[i]


cdef inline int _chol_inverse(double* V, int m, double* logdet) noexcept nogil:
    """In place: V -> V^-1 (full symmetric).  Returns LAPACK info."""
    cdef char uplo = b'L'
    cdef int info = 0
    cdef int i, j
    dpotrf(&uplo, &m, V, &m, &info)
    if info != 0:
        return info
    logdet[0] = 0.0
    for i in range(m):
        logdet[0] += 2.0 * log(V[i * m + i])
    dpotri(&uplo, &m, V, &m, &info)
    if info != 0:
        return info
    # column-major lower == row-major upper; mirror it
    for i in range(m):
        for j in range(i + 1, m):
            V[j * m + i] = V[i * m + j]
    return 0


def reml_value_grad(const double[::1] theta, const double[:, :, ::1] Bt,
                    const double[:, ::1] St):
    cdef int b = Bt.shape[0]
    cdef int m = Bt.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Vinv = np.empty((m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] T = np.empty((m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] R = np.empty((m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad = np.empty(b)
    cdef double* pv = <double*> Vinv.data
    cdef double* pt = <double*> T.data
    cdef double* pr = <double*> R.data
    cdef double logdet = 0.0, quad = 0.0, acc
    cdef const double* pb
    cdef int info, i, k
    cdef char no = b'N'
    cdef double one = 1.0, zero = 0.0
    with nogil:
        _assemble(theta, Bt, pv, m)
        info = _chol_inverse(pv, m, &logdet)
    if info != 0:
        grad[:] = NAN
        return -INFINITY, grad
    with nogil:
        dgemm(&no, &no, &m, &m, &m, &one, pv, &m, <double*> &St[0, 0], &m, &zero, pt, &m)
        for i in range(m):
            quad += pt[i * m + i]
        dgemm(&no, &no, &m, &m, &m, &one, pt, &m, pv, &m, &zero, pr, &m)
        for i in range(m * m):
            pr[i] -= pv[i]
        for k in range(b):
            pb = &Bt[k, 0, 0]
            acc = 0.0
            for i in range(m * m):
                acc += pb[i] * pr[i]
            grad[k] = acc
    return -logdet - quad, grad


def reml_value_grad_vec(const double[::1] theta, const double[:, :, ::1] Bt,
                        const double[::1] y):
    cdef int b = Bt.shape[0]
    cdef int m = Bt.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Vinv = np.empty((m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.empty(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad = np.empty(b)
    cdef double* pv = <double*> Vinv.data
    cdef double* pu = <double*> u.data
    cdef double logdet = 0.0, quad = 0.0, acc
    cdef const double* pb
    cdef int info, i, j, k
    with nogil:
        _assemble(theta, Bt, pv, m)
        info = _chol_inverse(pv, m, &logdet)
    if info != 0:
        grad[:] = NAN
        return -INFINITY, grad
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(m):
                acc += pv[i * m + j] * y[j]
            pu[i] = acc
            quad += y[i] * acc
        for i in range(m):
            for j in range(m):
                pv[i * m + j] = pu[i] * pu[j] - pv[i * m + j]
        for k in range(b):
            pb = &Bt[k, 0, 0]
            acc = 0.0
            for i in range(m * m):
                acc += pb[i] * pv[i]
            grad[k] = acc
    return -logdet - quad, grad


def reml_information(const double[::1] theta, const double[:, :, ::1] Bt):
    cdef int b = Bt.shape[0]
    cdef int m = Bt.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] L = np.empty((m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] W = np.empty((b, m, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] info_mat = np.empty((b, b))
    cdef double* pl = <double*> L.data
    cdef double* pw
    cdef double* pw2
    cdef char lo = b'L', left = b'L', right = b'R', no = b'N', tr = b'T'
    cdef double one = 1.0, acc
    cdef int info = 0, i, j, k
    with nogil:
        _assemble(theta, Bt, pl, m)
        dpotrf(&lo, &m, pl, &m, &info)
    if info != 0:
        raise np.linalg.LinAlgError("reduced covariance is not positive definite")
    with nogil:
        for k in range(b):
            pw = (<double*> W.data) + k * m * m
            for i in range(m * m):
                pw[i] = (&Bt[k, 0, 0])[i]
            dtrsm(&left, &lo, &no, &no, &m, &m, &one, pl, &m, pw, &m)
            dtrsm(&right, &lo, &tr, &no, &m, &m, &one, pl, &m, pw, &m)
        for i in range(b):
            pw = (<double*> W.data) + i * m * m
            for j in range(i, b):
                pw2 = (<double*> W.data) + j * m * m
                acc = 0.0
                for k in range(m * m):
                    acc += pw[k] * pw2[k]
                info_mat[i, j] = acc
                info_mat[j, i] = acc
    return info_mat


def feasible(const double[::1] theta, const double[:, :, ::1] B, double lower, double upper):
    cdef int n = B.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] V = np.empty((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.empty((n, n))
    cdef double* pv = <double*> V.data
    cdef double* pa = <double*> A.data
    cdef char lo = b'L'
    cdef int info = 0, i
    with nogil:
        _assemble(theta, B, pv, n)
        for i in range(n * n):
            pa[i] = pv[i]
        for i in range(n):
            pa[i * n + i] -= lower
        dpotrf(&lo, &n, pa, &n, &info)
        if info == 0 and upper > 0:
            for i in range(n * n):
                pa[i] = -pv[i]
            for i in range(n):
                pa[i * n + i] += upper
            dpotrf(&lo, &n, pa, &n, &info)
    return info == 0
