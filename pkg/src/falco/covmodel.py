"""Sample-covariance parametrization V(theta) = sum_j theta_j B_j.

Holds the basis matrices, their feasible parameter sets, reduced-coordinate
linear algebra on orthogonal complements, and the nuisance-covariate rotation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

SYMMETRY_RTOL = 1e-10
PROJECTION_TOL = 1e-8
DEFAULT_C_BOUND = 1e3


class CovarianceModelError(ValueError):
    """Raised for malformed bases, parameters or projections."""


class SingularReducedCovariance(CovarianceModelError):
    def __init__(self, theta, message="reduced covariance is not positive definite"):
        self.theta = np.array(theta, dtype=float)
        super().__init__(f"{message} at theta={self.theta.tolist()}")


def _check_symmetric(B, label):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise CovarianceModelError(f"{label} must be a square matrix, got shape {B.shape}")
    if not np.all(np.isfinite(B)):
        raise CovarianceModelError(f"{label} has non-finite entries")
    asym = np.max(np.abs(B - B.T)) if B.size else 0.0
    if asym == 0.0:
        return B
    scale = max(np.max(np.abs(B)), np.finfo(float).tiny)
    if asym > SYMMETRY_RTOL * scale:
        raise CovarianceModelError(
            f"{label} is not symmetric (max asymmetry {asym:.3g}, scale {scale:.3g})"
        )
    warnings.warn(f"{label} symmetrized (max asymmetry {asym:.3g})", stacklevel=3)
    return 0.5 * (B + B.T)


@dataclass(frozen=True, eq=False)
class CovarianceBasis:
    """Observed symmetric matrices B_1..B_b with constraint set A_v theta >= 0.

    Parameters
    ----------
    bases : array of shape (b, n, n)
    constraint_matrix : array of shape (q, b), default identity
    c_bound : float
        Constant of the compact set Theta*: ``||theta||_2 <= 2 b c`` and
        ``V(theta) - I/(2c)`` positive definite.
    """

    bases: np.ndarray
    constraint_matrix: np.ndarray = None
    c_bound: float = DEFAULT_C_BOUND
    gram: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        raw = self.bases
        if isinstance(raw, np.ndarray) and raw.ndim == 2:
            raw = raw[None]
        mats = [_check_symmetric(B, f"basis matrix {j}") for j, B in enumerate(raw)]
        if not mats:
            raise CovarianceModelError("at least one basis matrix is required")
        n = mats[0].shape[0]
        if any(B.shape != (n, n) for B in mats):
            raise CovarianceModelError("basis matrices must share one shape")
        if n < 2:
            raise CovarianceModelError("need n >= 2 samples")
        bases = np.ascontiguousarray(np.stack(mats))
        bases.setflags(write=False)
        b = len(mats)
        A = np.eye(b) if self.constraint_matrix is None else np.atleast_2d(
            np.asarray(self.constraint_matrix, dtype=float))
        if A.shape[1] != b:
            raise CovarianceModelError(
                f"constraint matrix has {A.shape[1]} columns, expected b={b}")
        A = A.copy()
        A.setflags(write=False)
        if not self.c_bound > 0:
            raise CovarianceModelError("c_bound must be positive")
        gram = np.einsum("rij,sji->rs", bases, bases) / n
        gram = 0.5 * (gram + gram.T)
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            raise CovarianceModelError(
                "basis matrices are linearly dependent (Gram matrix is singular)")
        gram.setflags(write=False)
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "constraint_matrix", A)
        object.__setattr__(self, "gram", gram)

    @property
    def n(self) -> int:
        return self.bases.shape[1]

    @property
    def b(self) -> int:
        return self.bases.shape[0]

    @property
    def eig_floor(self) -> float:
        """Lower eigenvalue bound 1/(2c) of Theta*."""
        return 0.5 / self.c_bound

    @property
    def norm_bound(self) -> float:
        return 2.0 * self.b * self.c_bound

    def assemble(self, theta) -> np.ndarray:
        return assemble_V(self, theta)

    def in_theta(self, theta, tol=1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        scale = tol * max(np.linalg.norm(theta), 1.0)
        return bool(np.all(self.constraint_matrix @ theta >= -scale))

    def in_theta_star(self, theta, strict=True) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not self.in_theta(theta) or np.linalg.norm(theta) > self.norm_bound:
            return False
        shifted = assemble_V(self, theta) - self.eig_floor * np.eye(self.n)
        if strict:
            return is_positive_definite(shifted)
        return np.linalg.eigvalsh(shifted)[0] >= -1e-10 * self.eig_floor

    def transformed(self, Q) -> "CovarianceBasis":
        """Basis of Q^T B_j Q (constraints and c unchanged)."""
        return CovarianceBasis(reduce_bases(self.bases, Q), self.constraint_matrix, self.c_bound)

    def identity_theta(self) -> np.ndarray:
        """Least-squares theta with V(theta) closest to I_n in Frobenius norm."""
        rhs = np.trace(self.bases, axis1=1, axis2=2) / self.n
        theta = np.linalg.solve(self.gram, rhs)
        # exact zeros where the solve leaves rounding noise (keeps theta on the cone)
        theta[np.abs(theta) <= 1e-12 * np.max(np.abs(theta))] = 0.0
        return theta


def is_positive_definite(A) -> bool:
    try:
        scipy.linalg.cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return False
    return True


def assemble_V(basis: CovarianceBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (basis.b,):
        raise CovarianceModelError(
            f"theta has shape {theta.shape}, expected ({basis.b},)")
    return np.tensordot(theta, basis.bases, axes=1)


def reduce_bases(bases, Q) -> np.ndarray:
    """Stack of Q^T B_j Q for each basis matrix."""
    Q = np.asarray(Q, dtype=float)
    out = np.matmul(np.matmul(Q.T[None], bases), Q[None])
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return np.ascontiguousarray(out)


def check_projection(P, tol=PROJECTION_TOL, label="projection") -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise CovarianceModelError(f"{label} must be square")
    scale = max(1.0, np.linalg.norm(P, 2)) if P.size else 1.0
    if np.max(np.abs(P - P.T), initial=0.0) > tol * scale:
        raise CovarianceModelError(f"{label} is not symmetric")
    if np.max(np.abs(P @ P - P), initial=0.0) > tol * scale:
        raise CovarianceModelError(f"{label} is not idempotent")
    return P


def orthonormal_complement(A, n=None, rtol=1e-10) -> np.ndarray:
    """Orthonormal basis (n x (n - rank A)) of ker(A^T) for an n x k matrix A."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if n is None:
        n = A.shape[0]
    if A.size == 0 or A.shape[1] == 0:
        return np.eye(n)
    U, s, _ = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > rtol * max(s[0], np.finfo(float).tiny))) if s.size else 0
    return U[:, rank:]


def complement_of_projection(P, tol=PROJECTION_TOL) -> np.ndarray:
    """Orthonormal basis of the null space of an orthogonal projection."""
    P = check_projection(P, tol)
    w, U = np.linalg.eigh(P)
    return U[:, w < 0.5]


def projected_gram(basis: CovarianceBasis, P_perp) -> np.ndarray:
    """M_rs = n^-1 tr(P B_r P B_s) for an orthogonal projection P."""
    P = check_projection(P_perp, label="P_perp")
    PB = np.matmul(P[None], basis.bases)
    M = np.einsum("rij,sji->rs", PB, PB) / basis.n
    return 0.5 * (M + M.T)


def reduced_gram(reduced_bases, n) -> np.ndarray:
    """Same as :func:`projected_gram` from bases already reduced by Q."""
    M = np.einsum("rij,sji->rs", reduced_bases, reduced_bases) / n
    return 0.5 * (M + M.T)


def restricted_quadratic(Y, basis: CovarianceBasis, theta, Q):
    """Log pseudo-determinant and quadratic term of P V(theta) P with P = Q Q^T.

    Returns ``(logdet, quad)`` where ``logdet = log|P V P|_+`` and
    ``quad = tr[(p^-1 Y^T Y) (P V P)^+]``, computed from the m x m matrix
    ``Q^T V Q``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Q = np.asarray(Q, dtype=float)
    if Y.shape[1] != basis.n or Q.shape[0] != basis.n:
        raise CovarianceModelError("dimension mismatch between Y, Q and basis")
    if not np.allclose(Q.T @ Q, np.eye(Q.shape[1]), atol=1e-8):
        raise CovarianceModelError("Q must have orthonormal columns")
    Vr = Q.T @ assemble_V(basis, theta) @ Q
    try:
        L = scipy.linalg.cholesky(Vr, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularReducedCovariance(theta) from exc
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Yr = Y @ Q
    Z = scipy.linalg.solve_triangular(L, Yr.T, lower=True, check_finite=False)
    quad = float(np.sum(Z * Z)) / Y.shape[0]
    return float(logdet), quad


def sym_power(V, power) -> np.ndarray:
    """Symmetric matrix power via eigendecomposition (V must be SPD)."""
    w, U = np.linalg.eigh(V)
    if w[0] <= 0:
        raise CovarianceModelError("matrix is not positive definite")
    return (U * w**power) @ U.T


@dataclass(frozen=True, eq=False)
class NuisanceRotation:
    Z: np.ndarray
    Q_Z: np.ndarray


def nuisance_rotation(Z) -> NuisanceRotation:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    s = np.linalg.svd(Z, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0] or Z.shape[1] >= Z.shape[0]:
        raise CovarianceModelError("nuisance covariates Z must have full column rank < n")
    Q = orthonormal_complement(Z)
    return NuisanceRotation(Z=Z, Q_Z=Q)


def rotate_out_nuisance(Y, Z, basis: CovarianceBasis):
    """Return (Y Q_Z, basis of Q_Z^T B_j Q_Z) with Q_Z spanning ker(Z^T)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != basis.n:
        raise CovarianceModelError("Y columns must match basis size n")
    rot = nuisance_rotation(Z)
    if rot.Z.shape[0] != basis.n:
        raise CovarianceModelError("Z rows must match basis size n")
    return Y @ rot.Q_Z, basis.transformed(rot.Q_Z)


def kron_identity(k, A) -> np.ndarray:
    return np.kron(np.eye(k), np.asarray(A, dtype=float))
