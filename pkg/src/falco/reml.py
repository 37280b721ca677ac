"""Restricted quasi-likelihood estimation of variance multipliers.

Every estimator here maximizes

    f(theta) = -log|Q^T V(theta) Q| - tr[S~ (Q^T V(theta) Q)^-1]

over Theta intersected with the compact set Theta*, where ``Q`` spans the
residual space of the mean model and ``S~`` is the reduced second moment
(``Q^T (p^-1 Y^T Y) Q`` for averaged problems, ``(Q^T y)(Q^T y)^T`` for a
single gene).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from ._backend import kernels
from .covmodel import (
    CovarianceBasis,
    CovarianceModelError,
    assemble_V,
    complement_of_projection,
    orthonormal_complement,
    reduce_bases,
)


class RemlError(RuntimeError):
    pass


class CollinearDesignError(CovarianceModelError):
    def __init__(self, direction, message="mean-model design is rank deficient"):
        self.direction = np.asarray(direction)
        super().__init__(f"{message}; near-null coefficient direction {np.round(self.direction, 6).tolist()}")


@dataclass(frozen=True)
class RemlOptions:
    ftol: float = 1e-9
    gtol: float = 1e-6
    max_iter: int = 500


DEFAULT_OPTIONS = RemlOptions()


@dataclass(frozen=True, eq=False)
class RemlSolution:
    theta_hat: np.ndarray
    objective: float
    converged: bool
    iterations: int
    kkt_residual: float
    degenerate: bool = False
    active: tuple = ()
    eig_bound: bool = False

    @property
    def on_boundary(self) -> bool:
        return self.degenerate or self.eig_bound or bool(self.active)


@dataclass(eq=False)
class RemlProblem:
    """Reduced REML objective for one data set.

    Exactly one of ``S_reduced`` (m x m) or ``y_reduced`` (length m) is given.
    ``upper`` adds the constraint ``V(theta) < upper * I`` when positive.
    """

    basis: CovarianceBasis
    bases_reduced: np.ndarray
    S_reduced: np.ndarray | None = None
    y_reduced: np.ndarray | None = None
    upper: float = 0.0
    data_scale: float = field(default=0.0)

    def __post_init__(self):
        self.bases_reduced = np.ascontiguousarray(self.bases_reduced, dtype=float)
        if (self.S_reduced is None) == (self.y_reduced is None):
            raise ValueError("give exactly one of S_reduced or y_reduced")
        if self.S_reduced is not None:
            S = np.asarray(self.S_reduced, dtype=float)
            self.S_reduced = np.ascontiguousarray(0.5 * (S + S.T))
        else:
            self.y_reduced = np.ascontiguousarray(self.y_reduced, dtype=float)
        self._full_bases = np.ascontiguousarray(self.basis.bases)
        self._A = np.ascontiguousarray(self.basis.constraint_matrix)
        self._radius2 = self.basis.norm_bound ** 2

    @property
    def m(self) -> int:
        return self.bases_reduced.shape[1]

    def value_grad(self, theta):
        theta = np.ascontiguousarray(theta, dtype=float)
        if self.S_reduced is not None:
            return kernels.reml_value_grad(theta, self.bases_reduced, self.S_reduced)
        return kernels.reml_value_grad_vec(theta, self.bases_reduced, self.y_reduced)

    def objective(self, theta) -> float:
        return float(self.value_grad(theta)[0])

    def information(self, theta):
        return kernels.reml_information(np.ascontiguousarray(theta, dtype=float), self.bases_reduced)

    def is_feasible(self, theta) -> bool:
        theta = np.ascontiguousarray(theta, dtype=float)
        if (self._A @ theta).min() < 0 or theta @ theta > self._radius2:
            return False
        return bool(kernels.feasible(theta, self._full_bases, self.basis.eig_floor, self.upper))

    def moments(self):
        """Moment vector r_j = tr(B~_j S~) and residual trace tr(S~)."""
        if self.S_reduced is not None:
            r = np.tensordot(self.bases_reduced, self.S_reduced, axes=([1, 2], [0, 1]))
            return r, float(np.trace(self.S_reduced))
        y = self.y_reduced
        r = np.einsum("jkl,k,l->j", self.bases_reduced, y, y)
        return r, float(y @ y)


# ---------------------------------------------------------------------------
# starting values


def moment_match(problem: RemlProblem) -> np.ndarray:
    """Least-squares solution of vec(S~) ~ sum_j theta_j vec(B~_j)."""
    Bt = problem.bases_reduced
    flat = Bt.reshape(Bt.shape[0], -1)
    G = flat @ flat.T
    r, _ = problem.moments()
    theta, *_ = np.linalg.lstsq(G, r, rcond=None)
    return theta


def _identity_start(problem: RemlProblem) -> np.ndarray:
    """Identity direction scaled to the residual variance, kept off the eigenvalue floor."""
    _, tr = problem.moments()
    direction = problem.basis.identity_theta()
    lam = np.linalg.eigvalsh(assemble_V(problem.basis, direction))[0]
    scale = tr / max(problem.m, 1)
    if lam > 0:
        scale = max(scale, 2.0 * problem.basis.eig_floor / lam)
    return direction * scale


def initial_theta(problem: RemlProblem) -> np.ndarray:
    theta = moment_match(problem)
    if problem.is_feasible(theta):
        return theta
    anchor = _identity_start(problem)
    if not problem.is_feasible(anchor):
        nnls_theta = _nonneg_match(problem)
        if nnls_theta is not None and problem.is_feasible(nnls_theta):
            anchor = nnls_theta
        else:
            raise RemlError("no feasible starting point in Theta* for this problem")
    for t in (0.5, 0.25, 0.125, 0.0625, 0.0):
        cand = t * theta + (1.0 - t) * anchor
        if problem.is_feasible(cand):
            return cand
    return anchor  # pragma: no cover - t=0 is the anchor


def _nonneg_match(problem):
    Bt = problem.bases_reduced
    flat = Bt.reshape(Bt.shape[0], -1)
    target = (problem.S_reduced if problem.S_reduced is not None
              else np.outer(problem.y_reduced, problem.y_reduced)).ravel()
    try:
        theta, _ = scipy.optimize.nnls(flat.T, target)
    except RuntimeError:
        return None
    return theta


def boundary_clamp(problem: RemlProblem) -> np.ndarray:
    """Point on the eigenvalue floor of Theta* along the identity direction."""
    direction = problem.basis.identity_theta()
    V = assemble_V(problem.basis, direction)
    lam = np.linalg.eigvalsh(V)[0]
    if lam <= 0 or not problem.basis.in_theta(direction):
        raise RemlError("cannot place a zero-residual fit on the Theta* boundary")
    return direction * (problem.basis.eig_floor / lam)


# ---------------------------------------------------------------------------
# projected quasi-Newton ascent


def _cone_projection(g, A_act):
    """Project g onto {d : A_act d >= 0}; returns (d, multipliers)."""
    if A_act.shape[0] == 0:
        return g.copy(), np.zeros(0)
    mu, _ = scipy.optimize.nnls(A_act.T, -g)
    return g + A_act.T @ mu, mu


def _direction(H, g, A, act, working):
    if not act:
        try:
            return np.linalg.solve(H, g), []
        except np.linalg.LinAlgError:
            return g.copy(), []
    working = list(working)
    while True:
        if working:
            Z = scipy.linalg.null_space(A[working])
        else:
            Z = np.eye(len(g))
        if Z.shape[1] == 0:
            return np.zeros_like(g), working
        Hz = Z.T @ H @ Z
        try:
            dz = scipy.linalg.solve(Hz, Z.T @ g, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            dz = Z.T @ g
        d = Z @ dz
        slack = [i for i in act if i not in working]
        if not slack:
            return d, working
        ad = A[slack] @ d
        tol = 1e-12 * np.linalg.norm(A[slack], axis=1) * np.linalg.norm(d)
        bad = np.flatnonzero(ad < -tol)
        if bad.size == 0:
            return d, working
        working.append(slack[int(bad[np.argmin(ad[bad])])])


def _bfgs_update(H, s, y):
    Hs = H @ s
    sHs = float(s @ Hs)
    sy = float(s @ y)
    if sHs <= 0:
        return H
    if sy < 0.2 * sHs:  # Powell damping keeps H positive definite
        phi = 0.8 * sHs / (sHs - sy)
        y = phi * y + (1.0 - phi) * Hs
        sy = float(s @ y)
    if sy <= 1e-300:
        return H
    return H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy


def _fisher_norm(problem, theta, pg) -> float:
    """Projected gradient length in the metric of the inverse information.

    Invariant to rescaling the data or the basis, unlike the Euclidean norm.
    """
    try:
        info = problem.information(theta)
        val = float(pg @ np.linalg.solve(info, pg))
    except np.linalg.LinAlgError:
        return float(np.linalg.norm(pg) * np.linalg.norm(theta) / np.sqrt(max(problem.m, 1)))
    return float(np.sqrt(max(val, 0.0)))


POLISH_STEPS = 2
EIG_ACTIVE_RTOL = 1e-6


def _eig_bounds(problem: RemlProblem, theta):
    """Linearized eigenvalue bounds of Theta* that are (nearly) binding at theta.

    Returns rows r with r @ d >= 0 keeping the bound to first order: the
    gradient of lambda_min(V) (floor) or minus that of lambda_max(V) (upper).
    """
    B = problem._full_bases
    floor = problem.basis.eig_floor
    upper = problem.upper * (1.0 - EIG_ACTIVE_RTOL) if problem.upper > 0 else 0.0
    # Cholesky screen: strictly inside both tightened bounds means nothing is binding
    if kernels.feasible(np.ascontiguousarray(theta), B, floor * (1.0 + EIG_ACTIVE_RTOL), upper):
        return np.zeros((0, theta.size))
    w, U = np.linalg.eigh(np.tensordot(theta, B, axes=1))
    rows = []
    if w[0] <= floor * (1.0 + EIG_ACTIVE_RTOL):
        u = U[:, 0]
        rows.append(np.einsum("i,jik,k->j", u, B, u))
    if problem.upper > 0 and w[-1] >= problem.upper * (1.0 - EIG_ACTIVE_RTOL):
        u = U[:, -1]
        rows.append(-np.einsum("i,jik,k->j", u, B, u))
    return np.array(rows).reshape(len(rows), theta.size)


def _restore(problem: RemlProblem, theta, w_dir, lw):
    """Move back inside the eigenvalue bounds along the identity direction ``w_dir``."""
    V = np.tensordot(theta, problem._full_bases, axes=1)
    e = np.linalg.eigvalsh(V)
    target = problem.basis.eig_floor * (1.0 + 1e-9)
    if e[0] < target and lw > 0:
        theta = theta + (target - e[0]) / lw * w_dir
    if problem.upper > 0 and e[-1] > problem.upper and lw > 0:
        theta = theta - (e[-1] - problem.upper * (1.0 - 1e-9)) / lw * w_dir
    return theta


def maximize(problem: RemlProblem, theta0, options: RemlOptions = DEFAULT_OPTIONS) -> RemlSolution:
    """Active-set projected BFGS ascent from a feasible ``theta0``.

    Linear constraints are handled exactly; the eigenvalue bounds of
    Theta* enter the active set through their linearization and steps
    that cross them are pulled back along the identity direction.  After
    the tolerance test passes, up to ``POLISH_STEPS`` further steps are
    taken so that the returned point is well inside the tolerance.
    """
    A_lin = problem.basis.constraint_matrix
    q = A_lin.shape[0]
    a_norm = np.linalg.norm(A_lin, axis=1)
    radius = problem.basis.norm_bound
    w_dir = problem.basis.identity_theta()
    lw = np.linalg.eigvalsh(assemble_V(problem.basis, w_dir))[0]
    if np.any(A_lin @ w_dir < 0):
        lw = 0.0
    theta = np.array(theta0, dtype=float)
    if not problem.is_feasible(theta):
        raise RemlError("starting point is outside Theta*")
    f, g = problem.value_grad(theta)
    try:
        H = problem.information(theta)
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        H = np.eye(theta.size) * problem.m / max(theta @ theta, 1e-300)
    H0 = H.copy()
    df = np.inf
    converged = degenerate = False
    polish = 0
    kkt = np.inf
    it = 0
    eig_active = False
    while True:
        tnorm = np.linalg.norm(theta)
        E = _eig_bounds(problem, theta)
        eig_active = E.shape[0] > 0
        A = np.vstack([A_lin, E]) if eig_active else A_lin
        act = np.flatnonzero(A_lin @ theta <= 1e-10 * a_norm * tnorm).tolist()
        act += list(range(q, q + E.shape[0]))
        pg, mu = _cone_projection(g, A[act])
        if converged:
            # polishing: screened in the quasi-Newton metric, the final
            # residual is measured with the information after the loop
            kkt = np.inf
            try:
                screen = float(pg @ np.linalg.solve(H, pg))
            except np.linalg.LinAlgError:
                screen = 0.0
            if polish >= POLISH_STEPS or screen <= (1e-3 * options.gtol) ** 2:
                break
            polish += 1
        else:
            kkt = np.inf
            if df <= options.ftol * max(abs(f), 1.0):
                # cheap screen in the quasi-Newton metric, confirmed with the information
                try:
                    screen = float(pg @ np.linalg.solve(H, pg))
                except np.linalg.LinAlgError:
                    screen = 0.0
                if screen <= 4 * options.gtol ** 2:
                    kkt = _fisher_norm(problem, theta, pg)
                    if kkt <= options.gtol:
                        converged = True
                        if kkt <= 1e-3 * options.gtol:
                            break
                        polish = 1
        if it >= options.max_iter:
            break
        it += 1
        working = [i for i, u in zip(act, mu) if u > 0]
        d, working = _direction(H, g, A, act, working)
        slope = float(g @ d)
        if not np.isfinite(slope) or slope <= 0:
            d, H = pg, H0.copy()
            slope = float(g @ d)
            if slope <= 0:
                kkt = _fisher_norm(problem, theta, pg)
                converged = converged or kkt <= options.gtol
                break
        # ratio test against inactive linear constraints and the norm ball
        alpha_max, blocking = np.inf, None
        ad = A_lin @ d
        cand = ad < 0
        cand[[i for i in act if i < q]] = False
        if cand.any():
            idx = np.flatnonzero(cand)
            steps = -(A_lin[idx] @ theta) / ad[idx]
            j = int(np.argmin(steps))
            alpha_max, blocking = float(steps[j]), int(idx[j])
        dd, td = d @ d, theta @ d
        disc = td * td - dd * (tnorm * tnorm - radius * radius)
        if dd > 0 and disc >= 0:
            ball = (-td + np.sqrt(disc)) / dd
            if ball < alpha_max:
                alpha_max, blocking = ball, None
        alpha = min(1.0, alpha_max)
        hit = alpha_max <= 1.0
        pd_blocked = False
        accepted = False
        for _ in range(60):
            trial = theta + alpha * d
            if hit and blocking is not None and alpha == alpha_max:
                a = A_lin[blocking]
                trial = trial - (a @ trial) / (a @ a) * a
            if eig_active:
                trial = _restore(problem, trial, w_dir, lw)
            if problem.is_feasible(trial):
                ft, gt = problem.value_grad(trial)
                if np.isfinite(ft) and ft >= f + 1e-4 * alpha * slope:
                    accepted = True
                    break
            else:
                pd_blocked = True
            alpha *= 0.5
            hit = False
        if not accepted:
            if converged:
                kkt = np.inf
            else:
                kkt = _fisher_norm(problem, theta, pg)
                if pd_blocked and kkt > options.gtol:
                    converged = degenerate = True
                else:
                    converged = kkt <= options.gtol
            break
        H = _bfgs_update(H, trial - theta, g - gt)
        df = abs(ft - f)
        theta, f, g = trial, ft, gt
    if not np.isfinite(kkt):
        E = _eig_bounds(problem, theta)
        A = np.vstack([A_lin, E]) if E.shape[0] else A_lin
        act = np.flatnonzero(A_lin @ theta <= 1e-10 * a_norm * np.linalg.norm(theta)).tolist()
        act += list(range(q, q + E.shape[0]))
        kkt = _fisher_norm(problem, theta, _cone_projection(g, A[act])[0])
    tnorm = np.linalg.norm(theta)
    active = tuple(np.flatnonzero(A_lin @ theta <= 1e-10 * a_norm * tnorm).tolist())
    eig_active = _eig_bounds(problem, theta).shape[0] > 0
    return RemlSolution(theta_hat=theta, objective=float(f), converged=converged,
                        iterations=it, kkt_residual=kkt, degenerate=degenerate,
                        active=active, eig_bound=eig_active)


ZERO_RESIDUAL_RTOL = 1e-20


def solve(problem: RemlProblem, theta0=None, options: RemlOptions = DEFAULT_OPTIONS,
          total_ss: float | None = None) -> RemlSolution:
    """Maximize the reduced objective; zero-residual data are clamped to Theta*'s floor.

    ``total_ss`` is the unreduced sum of squares used to decide whether the
    residual is numerically zero.
    """
    _, resid = problem.moments()
    ref = total_ss if total_ss is not None else resid
    if resid <= ZERO_RESIDUAL_RTOL * ref or resid == 0.0:
        theta = boundary_clamp(problem)
        return RemlSolution(theta_hat=theta, objective=problem.objective(theta),
                            converged=True, iterations=0, kkt_residual=0.0,
                            degenerate=True)
    if theta0 is None or not problem.is_feasible(theta0):
        theta0 = initial_theta(problem)
    return maximize(problem, theta0, options)


# ---------------------------------------------------------------------------
# public estimators


def second_moment(Y) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return Y.T @ Y / Y.shape[0]


def _check_Y(Y, basis):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != basis.n:
        raise CovarianceModelError(f"Y has {Y.shape[1]} columns, basis has n={basis.n}")
    if not np.all(np.isfinite(Y)):
        raise CovarianceModelError("Y has non-finite entries")
    return Y


def reml_full(Y, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS) -> RemlSolution:
    """Unprojected averaged problem (initial variance estimate)."""
    Y = _check_Y(Y, basis)
    S = second_moment(Y)
    problem = RemlProblem(basis, basis.bases, S_reduced=S)
    return solve(problem, None, options)


def reml_projected(Y, basis: CovarianceBasis, P_C_hat, warm_start=None,
                   options: RemlOptions = DEFAULT_OPTIONS) -> RemlSolution:
    """Averaged problem on the orthogonal complement of im(P_C_hat)."""
    Y = _check_Y(Y, basis)
    Q = complement_of_projection(P_C_hat)
    S = second_moment(Y)
    if Q.shape[1] == basis.n:
        problem = RemlProblem(basis, basis.bases, S_reduced=S)
    else:
        problem = RemlProblem(basis, reduce_bases(basis.bases, Q), S_reduced=Q.T @ S @ Q)
    return solve(problem, warm_start, options, total_ss=float(np.trace(S)))


def householder_reduce(bases, X, *vectors):
    """Restrict reduced bases and vectors to the orthogonal complement of X.

    Applies one Householder reflection per column of ``X`` (m x d), so the
    cost is O(d b m^2) rather than forming an orthonormal complement.
    Returns ``(bases', [vectors'...])`` in m - d coordinates.
    """
    B = np.array(bases, dtype=float)
    X = np.array(X, dtype=float).reshape(B.shape[1], -1)
    vecs = [np.array(v, dtype=float) for v in vectors]
    for j in range(X.shape[1]):
        x = X[:, 0]
        nx = np.linalg.norm(x)
        if nx == 0:
            raise CollinearDesignError(np.eye(X.shape[1])[0])
        v = x.copy()
        v[0] += np.copysign(nx, x[0])
        w = v * np.sqrt(2.0 / (v @ v))
        # (I - w w^T) B (I - w w^T), rows and columns after the first kept
        Bw = B @ w
        wBw = Bw @ w
        B = (B - Bw[:, :, None] * w[None, None, :] - w[None, :, None] * Bw[:, None, :]
             + wBw[:, None, None] * np.outer(w, w)[None])
        B = np.ascontiguousarray(B[:, 1:, 1:])
        X = (X - np.outer(w, w @ X))[1:, 1:]
        vecs = [(u - w * (w @ u))[1:] for u in vecs]
    return B, vecs


def _check_design(D):
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    if s.size == 0:
        return
    if s[-1] <= 1e-10 * s[0]:
        raise CollinearDesignError(Vt[-1])


class GeneModel:
    """Reduced coordinates for per-gene problems sharing one factor estimate.

    Precomputes an orthonormal basis ``Q`` of ker(C_hat^T) and the reduced
    bases ``Q^T B_j Q`` once; each gene then costs O(b m^2) to set up.
    """

    def __init__(self, C_hat, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS):
        self.basis = basis
        self.options = options
        C = np.zeros((basis.n, 0)) if C_hat is None else np.asarray(C_hat, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        if C.shape[0] != basis.n:
            raise CovarianceModelError("C_hat rows must match basis size n")
        if C.shape[1]:
            _check_design(C)
        self.C = C
        self.Q = orthonormal_complement(C, basis.n)
        self.bases_reduced = reduce_bases(basis.bases, self.Q) if C.shape[1] else \
            np.ascontiguousarray(basis.bases)

    @property
    def m(self) -> int:
        return self.Q.shape[1]

    def reduce(self, v):
        return self.Q.T @ v if self.C.shape[1] else np.array(v, dtype=float)

    def problem(self, y, X=None):
        y = np.asarray(y, dtype=float)
        yr = self.reduce(y)
        if X is None or np.size(X) == 0:
            return RemlProblem(self.basis, self.bases_reduced, y_reduced=yr)
        X = np.asarray(X, dtype=float).reshape(self.basis.n, -1)
        _check_design(np.hstack([self.C, X]))
        Bx, (yx,) = householder_reduce(self.bases_reduced, self.reduce(X), yr)
        return RemlProblem(self.basis, Bx, y_reduced=yx)

    def fit(self, y, X=None, theta0=None) -> RemlSolution:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.basis.n,):
            raise CovarianceModelError(f"y must have length n={self.basis.n}")
        return solve(self.problem(y, X), theta0, self.options, total_ss=float(y @ y))


def reml_gene(y, C_hat, basis: CovarianceBasis, options: RemlOptions = DEFAULT_OPTIONS) -> RemlSolution:
    """Per-gene REML with mean model y ~ C_hat l."""
    return GeneModel(C_hat, basis, options).fit(y)


def reml_denoise(y, C_hat, X_g, basis: CovarianceBasis,
                 options: RemlOptions = DEFAULT_OPTIONS) -> RemlSolution:
    """Per-gene REML with mean model y ~ (C_hat, X_g)."""
    X = np.asarray(X_g, dtype=float).reshape(basis.n, -1)
    return GeneModel(C_hat, basis, options).fit(y, X if X.shape[1] else None)
