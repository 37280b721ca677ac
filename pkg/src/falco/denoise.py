"""Inference after factor estimation.

Per-gene effects are estimated by GLS once the estimated factors are
projected out, with the gene's covariance fitted by REML on the residual
space of ``(C_hat, X_g)``.  Factors can also be regressed on observed
covariates with a REML-estimated covariance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from .covmodel import CovarianceBasis, CovarianceModelError, assemble_V, orthonormal_complement, reduce_bases
from .reml import (
    DEFAULT_OPTIONS,
    GeneModel,
    RemlOptions,
    RemlProblem,
    RemlSolution,
    _check_design,
    solve,
)


@dataclass(frozen=True, eq=False)
class GeneTest:
    gene: object
    s_hat: np.ndarray
    cov_s: np.ndarray
    alpha_hat: np.ndarray
    wald: float
    p_value: float
    converged: bool = True
    degenerate: bool = False
    boundary: bool = False

    @property
    def flags(self) -> str:
        out = []
        if not self.converged:
            out.append("not_converged")
        if self.degenerate:
            out.append("degenerate")
        elif self.boundary:
            out.append("boundary")
        return ",".join(out)


def _gls(Vr, Xr, yr):
    L = scipy.linalg.cholesky(Vr, lower=True)
    Xw = scipy.linalg.solve_triangular(L, Xr, lower=True)
    yw = scipy.linalg.solve_triangular(L, yr, lower=True)
    info = Xw.T @ Xw
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return cov @ (Xw.T @ yw), cov


class Denoiser:
    """Per-gene tests sharing one factor estimate ``C_hat``."""

    def __init__(self, C_hat, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS):
        self.model = GeneModel(C_hat, basis, options)
        self.basis = basis

    def test(self, y, X, gene=None) -> GeneTest:
        X = np.asarray(X, dtype=float).reshape(self.basis.n, -1)
        if X.shape[1] == 0:
            raise CovarianceModelError("X_g needs at least one column")
        sol = self.model.fit(y, X)
        m = self.model
        Vr = np.tensordot(sol.theta_hat, m.bases_reduced, axes=1)
        s_hat, cov = _gls(Vr, m.reduce(X), m.reduce(np.asarray(y, dtype=float)))
        wald = float(s_hat @ np.linalg.solve(cov, s_hat))
        pval = float(scipy.stats.chi2.sf(wald, X.shape[1]))
        return GeneTest(gene=gene, s_hat=s_hat, cov_s=cov, alpha_hat=sol.theta_hat, wald=wald,
                        p_value=pval, converged=sol.converged, degenerate=sol.degenerate,
                        boundary=bool(sol.active))

    def variance(self, y) -> RemlSolution:
        return self.model.fit(y)


def denoise_gene(y, C_hat, X_g, basis: CovarianceBasis, gene=None,
                 options: RemlOptions = DEFAULT_OPTIONS) -> GeneTest:
    """GLS estimate and Wald test of the effect of ``X_g`` on gene expression ``y``."""
    return Denoiser(C_hat, basis, options).test(y, X_g, gene)


def denoise_genes(Y, C_hat, designs, basis: CovarianceBasis, genes=None,
                  options: RemlOptions = DEFAULT_OPTIONS, n_jobs: int = 1) -> list:
    """:func:`denoise_gene` for every row of ``Y``; ``designs[g]`` is X_g."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    den = Denoiser(C_hat, basis, options)
    ids = list(range(Y.shape[0])) if genes is None else list(genes)

    def one(g):
        return den.test(Y[g], designs[g], ids[g])

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(one, range(Y.shape[0])))
    return [one(g) for g in range(Y.shape[0])]


class SharedShapeDenoiser:
    """Comparison method: one covariance shape for all genes, scaled per gene.

    The shape ``V(phi)`` is the REML fit of the averaged problem on the
    complement of ``C_hat``; each gene then gets its own scale
    ``sigma_g^2`` (REML given the shape) and ``s_g`` is estimated by GLS
    on ``[X_g, C_hat]``.  This is the usual way factor estimates from PCA
    are combined with a mixed model, and serves as the denoising baseline.
    """

    def __init__(self, Y, C_hat, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        C_hat = np.asarray(C_hat, dtype=float).reshape(basis.n, -1)
        self.basis = basis
        self.Q = orthonormal_complement(C_hat, basis.n)
        S = Y.T @ Y / Y.shape[0]
        Bt = reduce_bases(basis.bases, self.Q)
        problem = RemlProblem(basis, Bt, S_reduced=self.Q.T @ S @ self.Q)
        self.solution = solve(problem, None, options, total_ss=float(np.trace(S)))
        self.phi = self.solution.theta_hat
        self.W = np.tensordot(self.phi, Bt, axes=1)
        self._L = scipy.linalg.cholesky(self.W, lower=True)

    def scale(self, y, X=None) -> float:
        """REML estimate of sigma_g^2 with the shape held fixed and ``X`` fitted."""
        yr = self.Q.T @ np.asarray(y, dtype=float)
        r = scipy.linalg.solve_triangular(self._L, yr, lower=True)
        dof = self.Q.shape[1]
        if X is not None and X.shape[1]:
            Xw = scipy.linalg.solve_triangular(self._L, self.Q.T @ X, lower=True)
            r = r - Xw @ np.linalg.lstsq(Xw, r, rcond=None)[0]
            dof -= X.shape[1]
        if dof <= 0:
            raise CovarianceModelError("no residual degrees of freedom left for the scale")
        return float(r @ r / dof)

    def test(self, y, X, gene=None) -> GeneTest:
        X = np.asarray(X, dtype=float).reshape(self.basis.n, -1)
        if X.shape[1] == 0:
            raise CovarianceModelError("X_g needs at least one column")
        y = np.asarray(y, dtype=float)
        sigma2 = self.scale(y, X)
        s_hat, cov = _gls(self.W, self.Q.T @ X, self.Q.T @ y)
        cov = sigma2 * cov
        wald = float(s_hat @ np.linalg.solve(cov, s_hat))
        return GeneTest(gene=gene, s_hat=s_hat, cov_s=cov, alpha_hat=sigma2 * self.phi, wald=wald,
                        p_value=float(scipy.stats.chi2.sf(wald, X.shape[1])),
                        converged=self.solution.converged, boundary=bool(self.solution.active))


def estimate_Vg(y, C_hat, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS):
    """Gene-level covariance estimate V(v_hat_g) with the factors projected out.

    Returns ``(theta, V)``.
    """
    sol = GeneModel(C_hat, basis, options).fit(y)
    return sol.theta_hat, assemble_V(basis, sol.theta_hat)


@dataclass(frozen=True, eq=False)
class FactorCovariateTest:
    r: object
    omega_hat: float
    se: float
    z: float
    p_value: float
    theta_hat: np.ndarray
    degenerate: bool = False


def test_factor_covariate(c, X, basis: CovarianceBasis, r=None,
                          options: RemlOptions = DEFAULT_OPTIONS) -> FactorCovariateTest:
    """GLS slope of an estimated factor on a covariate, REML covariance.

    The variance parameters are confined to the box
    ``I / (2c) <= V(theta) <= 2 b c^2 I`` with ``c = basis.c_bound``.
    """
    c = np.asarray(c, dtype=float).ravel()
    X = np.asarray(X, dtype=float).reshape(basis.n, -1)
    if c.shape != (basis.n,):
        raise CovarianceModelError("factor column must have length n")
    if X.shape[1] != 1:
        raise CovarianceModelError("X must be a single covariate")
    _check_design(X)
    Q = orthonormal_complement(X, basis.n)
    upper = 2.0 * basis.b * basis.c_bound ** 2
    problem = RemlProblem(basis, reduce_bases(basis.bases, Q), y_reduced=Q.T @ c, upper=upper)
    sol = solve(problem, None, options, total_ss=float(c @ c))
    V = assemble_V(basis, sol.theta_hat)
    omega, cov = _gls(V, X, c)
    se = float(np.sqrt(cov[0, 0]))
    z = float(omega[0] / se)
    return FactorCovariateTest(r=r, omega_hat=float(omega[0]), se=se, z=z,
                               p_value=float(2 * scipy.stats.norm.sf(abs(z))),
                               theta_hat=sol.theta_hat, degenerate=sol.degenerate)


test_factor_covariate.__test__ = False  # not a pytest test


def bh_qvalues(p_values) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = p[order] * (m / np.arange(1, m + 1))
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(adj, 1.0)
    return q


def bh_fdr(p_values, q: float) -> np.ndarray:
    """Indices rejected by the BH step-up procedure at level q (sorted)."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    # rejections read off the adjusted p-values so the two functions never disagree on rounding
    return np.flatnonzero(bh_qvalues(p_values) <= q)
