"""Cross-validated choice of the number of latent factors.

Rows (genes) are split into folds.  For each fold the factor model is fitted
on the remaining rows for every rank up to ``K_max``, and the held-out rows
are scored by a closed-form leave-one-sample-out loss after whitening by
the training covariance and rotating by one Haar-random orthogonal matrix.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .covmodel import CovarianceBasis, CovarianceModelError, assemble_V, rotate_out_nuisance
from .factor import GATE_ALPHA, falco_fit
from .reml import DEFAULT_OPTIONS, RemlOptions

LEVERAGE_TOL = 1e-10


class LeverageError(ArithmeticError):
    def __init__(self, sample, h):
        self.sample = sample
        self.h = h
        super().__init__(f"leave-one-out leverage of sample {sample} is {h:.12g} (>= 1 - {LEVERAGE_TOL})")


def sample_haar_rotation(n: int, seed=None) -> np.ndarray:
    """Haar-distributed n x n orthogonal matrix (QR with sign-corrected R)."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(G)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


@dataclass(frozen=True, eq=False)
class FoldPlan:
    F: int
    assignment: np.ndarray  # values in 1..F
    seed: object = None

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if self.F < 2:
            raise ValueError("need at least two folds")
        if a.min(initial=self.F) < 1 or a.max(initial=1) > self.F:
            raise ValueError("fold ids must lie in 1..F")
        if len(np.unique(a)) != self.F:
            raise ValueError("every fold must be non-empty")

    def test_rows(self, f) -> np.ndarray:
        return np.flatnonzero(self.assignment == f)

    def train_rows(self, f) -> np.ndarray:
        return np.flatnonzero(self.assignment != f)


def sample_folds(p: int, F: int, rng, max_tries: int = 1000) -> np.ndarray:
    if p < F:
        raise ValueError(f"cannot split {p} rows into {F} non-empty folds")
    for _ in range(max_tries):
        a = rng.integers(1, F + 1, size=p)
        if np.all(np.bincount(a, minlength=F + 1)[1:] > 0):
            return a
    raise RuntimeError("fold sampling kept producing empty folds")  # pragma: no cover


def _whitener(V_hat):
    w, U = np.linalg.eigh(V_hat)
    if w[0] <= 0:
        raise CovarianceModelError("training covariance is not positive definite")
    return math.exp(np.sum(np.log(w)) / w.size), (U / np.sqrt(w)) @ U.T


def _leverage_basis(Vih, C_hat, Q):
    """Complete QR of C_bar: (range basis, complement basis, leverages)."""
    Cbar = Q.T @ Vih @ C_hat
    Qf, Rc = np.linalg.qr(Cbar, mode="complete")
    k = Cbar.shape[1]
    d = np.abs(np.diag(Rc[:k]))
    if np.min(d) <= 1e-12 * np.max(d):
        raise CovarianceModelError("whitened factor matrix is rank deficient")
    Qc = Qf[:, :k]
    return Qc, Qf[:, k:], np.sum(Qc * Qc, axis=1)


def leverages(V_hat, C_hat, Q) -> np.ndarray:
    """Diagonal of the hat matrix of C_bar = Q^T V_hat^{-1/2} C_hat."""
    C_hat = np.asarray(C_hat, dtype=float).reshape(Q.shape[0], -1)
    if C_hat.shape[1] == 0:
        return np.zeros(Q.shape[0])
    return _leverage_basis(_whitener(V_hat)[1], C_hat, Q)[2]


def loo_loss(Y_f, V_hat, C_hat, Q) -> float:
    """Whitened, rotated leave-one-sample-out loss of a test block.

    The OLS fit of each column of ``Ybar_f^T`` on ``Cbar`` is left out one
    sample at a time through the identity e_(-i) = e_i / (1 - h_i).
    """
    Y_f = np.atleast_2d(np.asarray(Y_f, dtype=float))
    n = Y_f.shape[1]
    weight, Vih = _whitener(V_hat)
    Ybar = Y_f @ Vih @ Q  # p_f x n
    C_hat = np.asarray(C_hat, dtype=float).reshape(n, -1)
    if C_hat.shape[1] == 0:
        return weight * float(np.sum(Ybar * Ybar))
    _, Qp, h = _leverage_basis(Vih, C_hat, Q)
    # 1 - h_i and the residuals both come from the complement basis, so
    # neither loses digits to cancellation when a leverage is close to 1
    m = np.sum(Qp * Qp, axis=1)
    bad = np.flatnonzero(m <= LEVERAGE_TOL)
    if bad.size:
        raise LeverageError(int(bad[0]), float(h[bad[0]]))
    resid = Qp @ (Qp.T @ Ybar.T)  # n x p_f
    return weight * float(np.sum(np.sum(resid * resid, axis=1) / m ** 2))


def loo_loss_refit(Y_f, V_hat, C_hat, Q) -> float:
    """Literal n-refit version of :func:`loo_loss` (for testing)."""
    Y_f = np.atleast_2d(np.asarray(Y_f, dtype=float))
    n = Y_f.shape[1]
    w, U = np.linalg.eigh(V_hat)
    Vih = (U / np.sqrt(w)) @ U.T
    Ybar = Y_f @ Vih @ Q
    Cbar = Q.T @ Vih @ np.asarray(C_hat, dtype=float).reshape(n, -1)
    total = 0.0
    for i in range(n):
        keep = np.arange(n) != i
        coef, *_ = np.linalg.lstsq(Cbar[keep], Ybar[:, keep].T, rcond=None)
        r = Ybar[:, i] - Cbar[i] @ coef
        total += float(r @ r)
    return math.exp(np.sum(np.log(w)) / n) * total


@dataclass(frozen=True, eq=False)
class CbcvResult:
    losses: np.ndarray  # F x (K_max + 1)
    total: np.ndarray
    K_hat: int
    K_max: int
    eta: float
    F: int
    seed: object
    folds: FoldPlan


def default_K_max(n: int, p: int, eta: float) -> int:
    return int(math.ceil(eta * min(n, p)))


def cbcv_select(Y, basis: CovarianceBasis, F: int = 2, eta: float = 0.5, seed=None,
                Z=None, K_max: int | None = None, alpha: float = GATE_ALPHA,
                options: RemlOptions = DEFAULT_OPTIONS, n_jobs: int = 1) -> CbcvResult:
    """Select the number of factors by minimizing the summed fold losses.

    Parameters
    ----------
    Y : (p, n) array
    basis : CovarianceBasis
    F : int
        Number of row folds.
    eta : float
        K_max = ceil(eta * min(n, p)) unless ``K_max`` is given.
    seed : int or Generator
        Drives the rotation (drawn first) and the fold assignment.
    Z : (n, r) array, optional
        Nuisance covariates, rotated out once before splitting.
    """
    if F < 2:
        raise ValueError("F must be at least 2")
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Z is not None:
        Y, basis = rotate_out_nuisance(Y, Z, basis)
    p, n = Y.shape
    if K_max is None:
        K_max = default_K_max(n, p, eta)
    rng = np.random.default_rng(seed)
    Q = sample_haar_rotation(n, rng)
    plan = FoldPlan(F, sample_folds(p, F, rng), seed)
    for f in range(1, F + 1):
        ntrain = plan.train_rows(f).size
        if ntrain < 1:
            raise ValueError(f"fold {f} leaves no training rows")
        if K_max >= min(n, ntrain):
            raise ValueError(f"K_max={K_max} too large for fold {f} with {ntrain} training rows")

    def run(f):
        train, test = plan.train_rows(f), plan.test_rows(f)
        fit = falco_fit(Y[train], basis, K_max, alpha=alpha, options=options)
        Yt = Y[test]
        return [loo_loss(Yt, assemble_V(basis, fit.theta_at(k)), fit.C_at(k), Q)
                for k in range(K_max + 1)]

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=min(n_jobs, F)) as ex:
            rows = list(ex.map(run, range(1, F + 1)))
    else:
        rows = [run(f) for f in range(1, F + 1)]
    losses = np.array(rows)
    if not np.all(np.isfinite(losses)):
        raise ArithmeticError("non-finite cross-validation loss")
    total = losses.sum(axis=0)
    return CbcvResult(losses=losses, total=total, K_hat=int(np.argmin(total)), K_max=K_max,
                      eta=eta, F=F, seed=seed, folds=plan)
