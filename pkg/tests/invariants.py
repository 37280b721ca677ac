"""Module-level invariants, each a function returning ``(ok, detail)``.

The module test files assert them one by one; the acceptance suite runs
the whole registry as a single criterion.
"""

import hashlib
import tempfile
from pathlib import Path

import numpy as np

from falco import io
from falco.cbcv import cbcv_select, leverages, loo_loss, loo_loss_refit, sample_haar_rotation
from falco.covmodel import (
    CovarianceBasis,
    assemble_V,
    orthonormal_complement,
    projected_gram,
    restricted_quadratic,
    rotate_out_nuisance,
)
from falco.denoise import Denoiser, _gls, bh_fdr, denoise_gene
from falco.factor import estimate_subspace, falco_fit, normalize_factors
from falco.reml import (
    GeneModel,
    RemlProblem,
    reml_denoise,
    reml_full,
    reml_gene,
    reml_projected,
    second_moment,
    solve,
)
from falco.simgen import SimConfig, condition_basis, oracle_quantities, simulate, sym_coefficients

from oracles import (
    cone_projected_norm,
    dense_objective,
    fd_gradient,
    pdet_pinv,
    projector,
    random_basis,
    random_spd,
    random_theta,
    sample_rows,
)

REGISTRY = {}


def invariant(fn):
    REGISTRY[fn.__name__] = fn
    return fn


def _small_sim(seed=0, p=300, K=3):
    cfg = SimConfig(p=p, n_individuals=20, K=K, pi=(1.0,) * K,
                    tau=tuple(np.linspace(0.9, 0.5, K)), seed=seed)
    return simulate(cfg)


# ---------------------------------------------------------------------------
# covmodel


@invariant
def covmodel_linearity():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        basis = random_basis(rng, 5, 3)
        t1, t2, a = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal()
        lhs = assemble_V(basis, a * t1 + t2)
        rhs = a * assemble_V(basis, t1) + assemble_V(basis, t2)
        worst = max(worst, np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(lhs))))
    return worst <= 1e-14, f"max rel error {worst:.2e}"


@invariant
def covmodel_restricted_quadratic_dense():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in range(4, 9):
        for _ in range(4):
            basis = random_basis(rng, n, 2)
            theta = random_theta(rng, 2)
            k = int(rng.integers(1, n - 1))
            C = rng.standard_normal((n, k))
            Q = orthonormal_complement(C)
            Y = rng.standard_normal((7, n))
            logdet, quad = restricted_quadratic(Y, basis, theta, Q)
            P = np.eye(n) - projector(C)
            ld, Minv = pdet_pinv(P @ assemble_V(basis, theta) @ P, n - k)
            q = float(np.trace(second_moment(Y) @ Minv))
            worst = max(worst, abs(logdet - ld) / max(1, abs(ld)), abs(quad - q) / max(1, abs(q)))
    return worst <= 1e-8, f"max rel error {worst:.2e}"


@invariant
def covmodel_projected_gram_identity():
    rng = np.random.default_rng(3)
    basis = random_basis(rng, 6, 3)
    M = projected_gram(basis, np.eye(6))
    return bool(np.array_equal(M, basis.gram)) or np.max(np.abs(M - basis.gram)) <= 1e-15, \
        f"max diff {np.max(np.abs(M - basis.gram)):.1e}"


@invariant
def covmodel_rotation():
    rng = np.random.default_rng(4)
    basis = random_basis(rng, 9, 3)
    Z = np.kron(np.ones((3, 1)), np.eye(3))
    Y = rng.standard_normal((11, 9))
    Yr, br = rotate_out_nuisance(Y, Z, basis)
    P = np.eye(9) - projector(Z)
    err = np.max(np.abs(Yr @ Yr.T - Y @ P @ Y.T))
    sym = max(np.max(np.abs(B - B.T)) for B in br.bases)
    return err <= 1e-10 and sym == 0.0 and Yr.shape[1] == 6, f"YY' error {err:.1e}, asym {sym:.1e}"


# ---------------------------------------------------------------------------
# reml


def _reml_instances(rng, count):
    for _ in range(count):
        n = int(rng.integers(4, 8))
        b = 2
        basis = random_basis(rng, n, b)
        theta = random_theta(rng, b)
        Y = sample_rows(rng, assemble_V(basis, theta), 20)
        yield basis, Y


@invariant
def reml_kkt_finite_difference():
    rng = np.random.default_rng(5)
    worst = 0.0
    for basis, Y in _reml_instances(rng, 10):
        n = basis.n
        S = second_moment(Y)
        sol = reml_full(Y, basis)
        if not sol.converged:
            return False, "reml_full did not converge"

        def f(t):
            return dense_objective(S, assemble_V(basis, t), np.eye(n), n)

        g = fd_gradient(f, sol.theta_hat)
        worst = max(worst, cone_projected_norm(g, basis.constraint_matrix, sol.theta_hat))
        C = rng.standard_normal((n, 1))
        sol = reml_gene(Y[0], C, basis)
        P = np.eye(n) - projector(C)

        def fg(t):
            return dense_objective(np.outer(Y[0], Y[0]), assemble_V(basis, t), P, n - 1)

        if sol.converged and not sol.degenerate:
            g = fd_gradient(fg, sol.theta_hat)
            worst = max(worst, cone_projected_norm(g, basis.constraint_matrix, sol.theta_hat))
    return worst <= 1e-4, f"max projected FD gradient {worst:.2e}"


@invariant
def reml_warm_vs_cold():
    rng = np.random.default_rng(6)
    bad = 0
    for basis, Y in _reml_instances(rng, 20):
        n = basis.n
        C = rng.standard_normal((n, 1))
        P = projector(C)
        warm = reml_full(Y, basis).theta_hat
        a = reml_projected(Y, basis, P, warm_start=warm)
        b = reml_projected(Y, basis, P, warm_start=basis.identity_theta())
        if a.converged and b.converged and a.objective < b.objective - 1e-6:
            bad += 1
    return bad == 0, f"{bad} instances where the warm start ended lower"


@invariant
def reml_scale_equivariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    checked = 0
    for basis, Y in _reml_instances(rng, 10):
        n = basis.n
        C = rng.standard_normal((n, 1))
        X = rng.standard_normal((n, 1))
        P = projector(C)
        for c in (0.1, 3.0):
            pairs = [
                (reml_full(Y, basis), reml_full(c * Y, basis)),
                (reml_projected(Y, basis, P), reml_projected(c * Y, basis, P)),
                (reml_gene(Y[0], C, basis), reml_gene(c * Y[0], C, basis)),
                (reml_denoise(Y[0], C, X, basis), reml_denoise(c * Y[0], C, X, basis)),
            ]
            for s1, s2 in pairs:
                if s1.on_boundary or s2.on_boundary:
                    continue
                checked += 1
                rel = np.linalg.norm(s2.theta_hat - c**2 * s1.theta_hat) / np.linalg.norm(c**2 * s1.theta_hat)
                worst = max(worst, rel)
    return worst <= 1e-8 and checked > 0, f"max rel deviation {worst:.2e} over {checked} interior fits"


@invariant
def reml_projected_rank0_is_full():
    rng = np.random.default_rng(8)
    for basis, Y in _reml_instances(rng, 5):
        a = reml_full(Y, basis)
        b = reml_projected(Y, basis, np.zeros((basis.n, basis.n)))
        if not np.array_equal(a.theta_hat, b.theta_hat) or a.objective != b.objective:
            return False, "rank-0 projected fit differs from full fit"
    return True, "bit-identical"


# ---------------------------------------------------------------------------
# factor estimation


def _eq7_objective(S, V, C):
    Vi = np.linalg.inv(V)
    H = projector(C)
    M = H @ Vi @ H
    return float(np.trace(Vi @ S @ Vi @ np.linalg.pinv(M, rcond=1e-10, hermitian=True)))


@invariant
def factor_proposition1_small():
    rng = np.random.default_rng(9)
    worst = np.inf
    for _ in range(10):
        n, p, k = int(rng.integers(3, 7)), int(rng.integers(4, 13)), int(rng.integers(1, 3))
        k = min(k, n - 1)
        V = random_spd(rng, n)
        Y = rng.standard_normal((p, n))
        S = second_moment(Y)
        best = _eq7_objective(S, V, estimate_subspace(S, V, k))
        rand = max(_eq7_objective(S, V, rng.standard_normal((n, k))) for _ in range(500))
        worst = min(worst, best - rand)
    return worst >= -1e-9, f"min margin over random projections {worst:.3e}"


def _falco_instance(seed=10, p=60, n=8, b=2, K=2):
    rng = np.random.default_rng(seed)
    basis = random_basis(rng, n, b)
    V = assemble_V(basis, random_theta(rng, b))
    L = rng.standard_normal((p, K)) * np.array([3.0, 2.0][:K])
    C = rng.standard_normal((n, K))
    Y = L @ C.T + sample_rows(rng, V, p)
    return Y, basis


@invariant
def factor_identity_reduction():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(5):
        Y = rng.standard_normal((30, 8)) * np.linspace(3, 1, 8)
        basis = CovarianceBasis(np.eye(8)[None])
        fit = falco_fit(Y, basis, 5)
        _, _, Vt = np.linalg.svd(Y)
        for k in range(1, 6):
            Pk = projector(fit.C_at(k))
            worst = max(worst, np.linalg.norm(Pk - Vt[:k].T @ Vt[:k]))
    return worst <= 1e-8, f"max projector distance {worst:.2e}"


@invariant
def factor_orthogonality_diagonalization_bias():
    Y, basis = _falco_instance()
    fit = falco_fit(Y, basis, 3)
    p, n = Y.shape
    worst_orth = worst_diag = 0.0
    min_gap = np.inf
    V = fit.V_hat
    for step in fit.steps[1:]:
        C = step.C_hat
        worst_orth = max(worst_orth, np.max(np.abs(C.T @ C / n - np.eye(step.k))))
        min_gap = min(min_gap, np.min(step.lambda_naive - step.lambda_hat))
    f = normalize_factors(Y, V, estimate_subspace(second_moment(Y), V, 3))
    D = n / p * f.L_hat.T @ f.L_hat - np.linalg.inv(f.C_hat.T @ np.linalg.solve(V, f.C_hat) / n)
    worst_diag = np.max(np.abs(D - np.diag(f.lambda_hat)))
    ok = worst_orth <= 1e-8 and worst_diag <= 1e-8 and min_gap > 0
    return ok, f"orth {worst_orth:.1e}, diag {worst_diag:.1e}, min naive-corrected gap {min_gap:.3g}"


@invariant
def factor_basis_invariance():
    Y, basis = _falco_instance(seed=12)
    rng = np.random.default_rng(12)
    V = assemble_V(basis, reml_full(Y, basis).theta_hat)
    Ct = estimate_subspace(second_moment(Y), V, 2)
    R = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    a = normalize_factors(Y, V, Ct)
    b = normalize_factors(Y, V, Ct @ R)
    err = max(np.max(np.abs(a.C_hat - b.C_hat)), np.max(np.abs(a.L_hat - b.L_hat)),
              np.max(np.abs(a.lambda_hat - b.lambda_hat)))
    rank_err = np.max(np.abs(a.L_hat @ a.C_hat.T - Y @ np.linalg.solve(V, Ct) @ np.linalg.solve(
        Ct.T @ np.linalg.solve(V, Ct), Ct.T)))
    return err <= 1e-8 and rank_err <= 1e-8, f"rotation change {err:.1e}, L C^T vs L~ C~^T {rank_err:.1e}"


# ---------------------------------------------------------------------------
# cbcv


@invariant
def cbcv_loo_equals_refit():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(50):
        n, k = int(rng.integers(4, 9)), int(rng.integers(0, 3))
        V = random_spd(rng, n)
        Q = sample_haar_rotation(n, rng)
        C = rng.standard_normal((n, k))
        Yf = rng.standard_normal((6, n))
        worst = max(worst, abs(loo_loss(Yf, V, C, Q) - loo_loss_refit(Yf, V, C, Q)))
    return worst <= 1e-9, f"max discrepancy {worst:.2e}"


@invariant
def cbcv_determinism():
    data = _small_sim(seed=1)
    a = cbcv_select(data.Y, data.basis, seed=5, K_max=6)
    b = cbcv_select(data.Y, data.basis, seed=5, K_max=6)
    same = np.array_equal(a.losses, b.losses) and np.array_equal(a.folds.assignment, b.folds.assignment)
    return same and a.K_hat == b.K_hat, f"K_hat {a.K_hat} / {b.K_hat}"


@invariant
def cbcv_scale_invariance():
    data = _small_sim(seed=2)
    ks = [cbcv_select(c * data.Y, data.basis, seed=9, K_max=6).K_hat for c in (1.0, 0.1, 10.0)]
    return len(set(ks)) == 1, f"K_hat at c=1, 0.1, 10: {ks}"


@invariant
def cbcv_leverage_concentration():
    data = _small_sim(seed=3, p=500, K=4)
    n = data.n
    fit = falco_fit(data.Y, data.basis, 4)
    rng = np.random.default_rng(3)
    worst = -np.inf
    for k in range(1, 5):
        h = leverages(assemble_V(data.basis, fit.theta_at(k)), fit.C_at(k), sample_haar_rotation(n, rng))
        worst = max(worst, np.max(np.abs(h - k / n)) - (0.5 * k / n + 5 / np.sqrt(n)))
    return worst <= 0, f"max excess over the bound {worst:.3f}"


# ---------------------------------------------------------------------------
# denoise


@invariant
def denoise_gls_dense_pinv():
    rng = np.random.default_rng(14)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(5, 11))
        basis = random_basis(rng, n, 2)
        C = rng.standard_normal((n, 2))
        X = rng.standard_normal((n, 1))
        y = rng.standard_normal(n)
        den = Denoiser(C, basis)
        t = den.test(y, X)
        P = np.eye(n) - projector(C)
        Mp = np.linalg.pinv(P @ assemble_V(basis, t.alpha_hat) @ P, rcond=1e-10, hermitian=True)
        cov = np.linalg.inv(X.T @ Mp @ X)
        s = cov @ X.T @ Mp @ y
        worst = max(worst, np.max(np.abs(s - t.s_hat)) / max(1, np.max(np.abs(s))),
                    np.max(np.abs(cov - t.cov_s)) / np.max(np.abs(cov)))
    return worst <= 1e-8, f"max rel error {worst:.2e}"


@invariant
def denoise_ols_reduction():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(6, 15))
        basis = CovarianceBasis(np.eye(n)[None])
        X = rng.standard_normal((n, 1))
        y = 0.3 * X[:, 0] + rng.standard_normal(n)
        t = denoise_gene(y, np.zeros((n, 0)), X, basis)
        beta = float(X[:, 0] @ y / (X[:, 0] @ X[:, 0]))
        resid = y - beta * X[:, 0]
        s2 = resid @ resid / (n - 1)
        t2 = beta**2 / (s2 / (X[:, 0] @ X[:, 0]))
        worst = max(worst, abs(t.wald - t2) / t2, abs(t.s_hat[0] - beta) / max(abs(beta), 1e-12))
    return worst <= 1e-8, f"max rel error {worst:.2e}"


@invariant
def denoise_bh_monotone():
    rng = np.random.default_rng(16)
    for _ in range(50):
        p = rng.uniform(0, 1, 200) ** 3
        prev = set()
        for q in np.linspace(0.01, 0.5, 25):
            cur = set(bh_fdr(p, q).tolist())
            if not prev <= cur:
                return False, f"rejection set shrank at q={q:.3f}"
            prev = cur
    return True, "monotone in q"


# ---------------------------------------------------------------------------
# simgen


@invariant
def simgen_reproducible():
    a, b = _small_sim(seed=4, p=100), _small_sim(seed=4, p=100)
    same = all(np.array_equal(getattr(a, f), getattr(b, f))
               for f in ("Y", "L_true", "C_true", "s_true", "genotypes", "v_true"))
    return same, "bit-identical" if same else "datasets differ"


@invariant
def simgen_oracle_full_rank():
    data = _small_sim(seed=5, p=100)
    o = oracle_quantities(data.L_true, data.C_true, data.V_bar, data.config.K)
    err = np.max(np.abs(o.L_oracle @ o.C_oracle.T - data.L_true @ data.C_true.T))
    n = data.n
    orth = np.max(np.abs(o.C_oracle.T @ o.C_oracle / n - np.eye(data.config.K)))
    return err <= 1e-8 and orth <= 1e-8, f"reconstruction {err:.1e}, orthogonality {orth:.1e}"


@invariant
def simgen_basis_spans_structure():
    rng = np.random.default_rng(17)
    A = condition_basis(3)
    worst = 0.0
    for _ in range(10):
        M = random_spd(rng, 3)
        worst = max(worst, np.max(np.abs(np.tensordot(sym_coefficients(M), A, axes=1) - M)))
    return worst <= 1e-8, f"max reassembly error {worst:.1e}"


@invariant
def simgen_noise_second_moment():
    data = simulate(SimConfig(seed=6))
    E = data.Y - data.L_true @ data.C_true.T
    p, n = E.shape
    err = np.linalg.norm(E.T @ E / p - data.V_bar, 2)
    bound = 5 * np.sqrt(n / p)
    return err <= bound, f"operator-norm error {err:.3f} (bound {bound:.3f})"


# ---------------------------------------------------------------------------
# io / cli


@invariant
def io_tsv_round_trip():
    rng = np.random.default_rng(18)
    M = rng.standard_normal((7, 5)) * 10.0 ** rng.integers(-300, 300, (7, 5))
    M[0, 0] = 0.1 + 0.2
    with tempfile.TemporaryDirectory() as d:
        a, b = Path(d) / "a.tsv", Path(d) / "b.tsv"
        io.write_matrix(a, M, [f"g{i}" for i in range(7)], [f"s{j}" for j in range(5)])
        M2, rows, cols = io.read_matrix(a)
        io.write_matrix(b, M2, rows, cols)
        same = a.read_bytes() == b.read_bytes() and np.array_equal(M, M2)
    return same, "byte-identical" if same else "round trip changed the file"


@invariant
def cli_simulate_deterministic():
    from falco.cli import main

    with tempfile.TemporaryDirectory() as d:
        digests = []
        for run in ("a", "b"):
            out = Path(d) / run
            rc = main(["simulate", "--seed", "7", "--out", str(out), "--config", _tiny_sim_config(d)])
            if rc != 0:
                return False, f"simulate exited with {rc}"
            digests.append(hashlib.sha256((out / "Y.tsv").read_bytes()).hexdigest())
    return digests[0] == digests[1], f"Y.tsv sha256 {digests[0][:12]} / {digests[1][:12]}"


def _tiny_sim_config(d):
    path = Path(d) / "run.json"
    io.write_json(path, {"schema_version": 1, "command": "simulate",
                         "simulation": {"p": 50, "n_individuals": 5, "K": 2, "pi": [1.0, 1.0],
                                        "tau": [0.9, 0.5]}})
    return str(path)
