"""Alternating estimation of latent factors and the sample covariance.

``falco_fit`` interleaves generalized-eigenvector subspace estimates with
REML updates of the variance multipliers.  The variance update at a rank
is skipped, and the previous estimate frozen for all larger ranks, when
the projected basis Gram matrix loses too much conditioning.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .covmodel import (
    CovarianceBasis,
    CovarianceModelError,
    assemble_V,
    orthonormal_complement,
    reduce_bases,
    nuisance_rotation,
    reduced_gram,
    rotate_out_nuisance,
)
from .reml import (
    DEFAULT_OPTIONS,
    RemlOptions,
    RemlProblem,
    second_moment,
    solve,
)

log = logging.getLogger(__name__)

GATE_ALPHA = 0.1


def _eig_sqrt(V):
    w, U = np.linalg.eigh(V)
    if w[0] <= 0:
        raise CovarianceModelError("estimated covariance is not positive definite")
    r = np.sqrt(w)
    return (U * r) @ U.T, (U / r) @ U.T


class SubspaceTieWarning(UserWarning):
    """Eigenvalues k and k+1 coincide, so the rank-k subspace is not unique."""


def estimate_subspace(S, V, k):
    """C~ = V^{1/2} W, W the top-k eigenvectors of V^{-1/2} S V^{-1/2}.

    With S = Y^T Y / p these are the top right singular vectors of
    Y V^{-1/2}.
    """
    if k == 0:
        return np.zeros((S.shape[0], 0))
    Vh, Vih = _eig_sqrt(V)
    w, W = np.linalg.eigh(Vih @ S @ Vih)
    w, W = w[::-1], W[:, ::-1]
    if k < w.size and w[k - 1] - w[k] <= 1e-10 * max(abs(w[0]), 1e-300):
        warnings.warn(f"tied eigenvalues at rank {k}: the subspace is ill-defined",
                      SubspaceTieWarning, stacklevel=2)
    return Vh @ W[:, :k]


def _sign_fix(C):
    idx = np.argmax(np.abs(C), axis=0)
    s = np.sign(C[idx, np.arange(C.shape[1])])
    s[s == 0] = 1.0
    return s


@dataclass(frozen=True, eq=False)
class Factors:
    """Normalized factor estimate at one rank (n^-1 C^T C = I)."""

    C_hat: np.ndarray
    L_hat: np.ndarray | None
    lambda_hat: np.ndarray
    lambda_naive: np.ndarray


def normalize_factors(Y, V, C_tilde, with_loadings=True) -> Factors:
    """Loadings by GLS on C~, then rotate so that L^T L is diagonal.

    ``lambda_hat`` subtracts the sampling inflation of the GLS loadings,
    ``lambda_naive`` does not.
    """
    Y = np.asarray(Y, dtype=float)
    p, n = Y.shape
    k = C_tilde.shape[1]
    if k == 0:
        return Factors(np.zeros((n, 0)), np.zeros((p, 0)) if with_loadings else None,
                       np.zeros(0), np.zeros(0))
    ViC = np.linalg.solve(V, C_tilde)
    CViC = C_tilde.T @ ViC
    M = ViC @ np.linalg.inv(CViC)  # L~ = Y M
    S = second_moment(Y)
    LtL = n * (M.T @ S @ M)  # n p^-1 L~^T L~
    LtL = 0.5 * (LtL + LtL.T)
    G = C_tilde.T @ C_tilde / n
    Gh, Gih = _eig_sqrt(G)
    infl = np.linalg.inv(CViC / n)
    A = LtL - 0.5 * (infl + infl.T)
    lam, U = np.linalg.eigh(Gh @ A @ Gh)
    lam, U = lam[::-1], U[:, ::-1]
    naive = np.linalg.eigvalsh(Gh @ LtL @ Gh)[::-1]
    C_hat = C_tilde @ Gih @ U
    s = _sign_fix(C_hat)
    C_hat = C_hat * s
    L_hat = (Y @ M) @ Gh @ U * s if with_loadings else None
    return Factors(C_hat, L_hat, lam, naive)


@dataclass(frozen=True, eq=False)
class FalcoStep:
    k: int
    theta: np.ndarray
    C_hat: np.ndarray
    lambda_hat: np.ndarray
    lambda_naive: np.ndarray
    gated: bool
    frozen: bool
    solutions: tuple = ()


@dataclass(frozen=True, eq=False)
class FactorFit:
    """Result of :func:`falco_fit` at the largest requested rank.

    ``steps[k]`` holds the rank-k estimate for k = 0..K (the rank-0 entry is
    the unprojected REML fit).  With nuisance covariates the fit lives in the
    rotated sample space of dimension n - r and ``Q_Z`` maps it back.
    """

    C_hat: np.ndarray
    L_hat: np.ndarray
    lambda_hat: np.ndarray
    lambda_naive: np.ndarray
    theta_hat: np.ndarray
    basis: CovarianceBasis
    steps: tuple
    Q_Z: np.ndarray | None = None
    frozen_at: int | None = None
    converged: bool = True

    @property
    def K(self) -> int:
        return self.C_hat.shape[1]

    @property
    def V_hat(self) -> np.ndarray:
        return assemble_V(self.basis, self.theta_hat)

    def theta_at(self, k) -> np.ndarray:
        return self.steps[k].theta

    def C_at(self, k) -> np.ndarray:
        return self.steps[k].C_hat


def falco_fit(Y, basis: CovarianceBasis, K: int, Z=None, alpha: float = GATE_ALPHA,
              options: RemlOptions = DEFAULT_OPTIONS) -> FactorFit:
    """Estimate K latent factors and the variance multipliers.

    Parameters
    ----------
    Y : (p, n) array
    basis : CovarianceBasis on the n samples
    K : int
        Largest rank; every rank 0..K is fitted along the way.
    Z : (n, r) array, optional
        Nuisance covariates, rotated out before fitting.
    alpha : float
        Conditioning threshold for the projected basis Gram matrix.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != basis.n:
        raise CovarianceModelError(f"Y has {Y.shape[1]} columns, basis has n={basis.n}")
    if not np.all(np.isfinite(Y)):
        raise CovarianceModelError("Y has non-finite entries")
    Q_Z = None
    if Z is not None:
        Q_Z = nuisance_rotation(Z).Q_Z
        Y, basis = rotate_out_nuisance(Y, Z, basis)
    p, n = Y.shape
    K = int(K)
    if K < 0 or K >= min(n, p):
        raise CovarianceModelError(f"K must satisfy 0 <= K < min(n, p) = {min(n, p)}")
    S = second_moment(Y)
    ref = np.linalg.eigvalsh(basis.gram)[0]

    sol0 = solve(RemlProblem(basis, basis.bases, S_reduced=S), None, options)
    theta = sol0.theta_hat
    all_converged = sol0.converged
    f0 = normalize_factors(Y, assemble_V(basis, theta), np.zeros((n, 0)), False)
    steps = [FalcoStep(0, theta, f0.C_hat, f0.lambda_hat, f0.lambda_naive,
                       False, False, (sol0,))]
    frozen_at = None
    for k in range(1, K + 1):
        sols = []
        gated = False
        C = estimate_subspace(S, assemble_V(basis, theta), k)
        if frozen_at is None:
            for _ in range(2):
                Q = orthonormal_complement(C, n)
                Bt = reduce_bases(basis.bases, Q)
                lam_min = np.linalg.eigvalsh(reduced_gram(Bt, n))[0]
                if lam_min <= alpha * ref:
                    gated = True
                    frozen_at = k
                    log.info("variance update frozen at k=%d (gram ratio %.3g)", k, lam_min / ref)
                    break
                sol = solve(RemlProblem(basis, Bt, S_reduced=Q.T @ S @ Q), theta, options,
                            total_ss=float(np.trace(S)))
                sols.append(sol)
                all_converged &= sol.converged
                theta = sol.theta_hat
                C = estimate_subspace(S, assemble_V(basis, theta), k)
        fk = normalize_factors(Y, assemble_V(basis, theta), C, with_loadings=False)
        steps.append(FalcoStep(k, theta, fk.C_hat, fk.lambda_hat, fk.lambda_naive,
                               gated, frozen_at is not None, tuple(sols)))
    V = assemble_V(basis, theta)
    final = normalize_factors(Y, V, estimate_subspace(S, V, K), with_loadings=True)
    return FactorFit(C_hat=final.C_hat, L_hat=final.L_hat, lambda_hat=final.lambda_hat,
                     lambda_naive=final.lambda_naive, theta_hat=theta, basis=basis,
                     steps=tuple(steps), Q_Z=Q_Z, frozen_at=frozen_at,
                     converged=bool(all_converged))


@dataclass(frozen=True, eq=False)
class PcaFit:
    C_hat: np.ndarray
    L_hat: np.ndarray
    singular_values: np.ndarray = field(repr=False)


def pca_fit(Y, k: int) -> PcaFit:
    """Baseline: C = sqrt(n) times the top-k right singular vectors of Y."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[1]
    _, s, Vt = np.linalg.svd(Y, full_matrices=False)
    C = np.sqrt(n) * Vt[:k].T
    C = C * _sign_fix(C)
    return PcaFit(C_hat=C, L_hat=Y @ C / n, singular_values=s)
