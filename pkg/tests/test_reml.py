import numpy as np
import pytest

from falco.covmodel import CovarianceBasis, CovarianceModelError, assemble_V, orthonormal_complement, reduce_bases
from falco.reml import (
    CollinearDesignError,
    GeneModel,
    RemlError,
    RemlOptions,
    RemlProblem,
    householder_reduce,
    maximize,
    moment_match,
    reml_denoise,
    reml_full,
    reml_gene,
    reml_projected,
    second_moment,
    solve,
)

import invariants
from oracles import grid_search_b2, projector, random_basis, random_theta, sample_rows


@pytest.mark.parametrize("name", [k for k in invariants.REGISTRY if k.startswith("reml_")])
def test_invariant(name):
    ok, detail = invariants.REGISTRY[name]()
    assert ok, detail


@pytest.fixture
def scalar_case():
    rng = np.random.default_rng(0)
    n = 7
    return rng, n, CovarianceBasis(np.eye(n)[None]), rng.standard_normal((15, n)) * 1.3


def test_full_scalar_closed_form(scalar_case):
    _, n, basis, Y = scalar_case
    sol = reml_full(Y, basis)
    assert sol.converged
    assert sol.theta_hat[0] == pytest.approx(np.trace(second_moment(Y)) / n, rel=1e-10)


def test_projected_scalar_closed_form(scalar_case):
    rng, n, basis, Y = scalar_case
    k = 2
    P = projector(rng.standard_normal((n, k)))
    Pp = np.eye(n) - P
    sol = reml_projected(Y, basis, P, warm_start=np.array([1.0]))
    assert sol.theta_hat[0] == pytest.approx(np.trace(Pp @ second_moment(Y) @ Pp) / (n - k), rel=1e-10)


def test_gene_and_denoise_scalar_closed_form(scalar_case):
    rng, n, basis, Y = scalar_case
    C = rng.standard_normal((n, 2))
    X = rng.standard_normal((n, 1))
    y = Y[0]
    r = (np.eye(n) - projector(C)) @ y
    assert reml_gene(y, C, basis).theta_hat[0] == pytest.approx(r @ r / (n - 2), rel=1e-10)
    D = np.hstack([C, X])
    r = (np.eye(n) - projector(D)) @ y
    assert reml_denoise(y, C, X, basis).theta_hat[0] == pytest.approx(r @ r / (n - 3), rel=1e-10)


def test_denoise_without_covariates_is_gene_fit():
    rng = np.random.default_rng(1)
    basis = random_basis(rng, 6, 2)
    C = rng.standard_normal((6, 1))
    y = rng.standard_normal(6)
    a = reml_gene(y, C, basis)
    b = reml_denoise(y, C, np.zeros((6, 0)), basis)
    np.testing.assert_array_equal(a.theta_hat, b.theta_hat)


def test_scale_by_two_quadruples_theta():
    rng = np.random.default_rng(2)
    basis = random_basis(rng, 5, 2)
    Y = sample_rows(rng, assemble_V(basis, np.array([1.0, 0.8])), 40)
    a, b = reml_full(Y, basis), reml_full(2 * Y, basis)
    np.testing.assert_allclose(b.theta_hat, 4 * a.theta_hat, rtol=1e-8)


def test_zero_residual_gene_is_clamped():
    rng = np.random.default_rng(3)
    basis = random_basis(rng, 6, 2)
    C = rng.standard_normal((6, 2))
    y = C @ np.array([1.0, -2.0])
    sol = reml_gene(y, C, basis)
    assert sol.converged and sol.degenerate and sol.on_boundary
    lam = np.linalg.eigvalsh(assemble_V(basis, sol.theta_hat))[0]
    assert lam == pytest.approx(basis.eig_floor, rel=1e-10)


def test_collinear_design_names_direction():
    rng = np.random.default_rng(4)
    basis = random_basis(rng, 6, 2)
    C = rng.standard_normal((6, 1))
    X = 3.0 * C
    with pytest.raises(CollinearDesignError) as err:
        reml_denoise(rng.standard_normal(6), C, X, basis)
    d = err.value.direction
    np.testing.assert_allclose(np.abs(d) / np.linalg.norm(d), np.array([3, 1]) / np.sqrt(10), atol=1e-8)


def test_max_iterations_reports_best_iterate():
    rng = np.random.default_rng(5)
    basis = random_basis(rng, 6, 3)
    Y = sample_rows(rng, assemble_V(basis, np.array([1.0, 0.5, 0.7])), 30)
    sol = reml_full(Y, basis, RemlOptions(max_iter=1, gtol=1e-14, ftol=1e-16))
    assert not sol.converged
    assert basis.in_theta_star(sol.theta_hat)
    full = reml_full(Y, basis)
    assert sol.objective <= full.objective + 1e-12


def test_solution_in_theta_star_and_kkt():
    rng = np.random.default_rng(6)
    for _ in range(10):
        basis = random_basis(rng, 5, 3)
        Y = sample_rows(rng, assemble_V(basis, random_theta(rng, 3)), 12)
        sol = reml_full(Y, basis)
        assert basis.in_theta_star(sol.theta_hat)
        if sol.converged and not sol.degenerate:
            assert sol.kkt_residual <= RemlOptions().gtol


def test_boundary_solution_is_flagged():
    rng = np.random.default_rng(7)
    n = 6
    a = rng.standard_normal(n)
    basis = CovarianceBasis(np.stack([np.eye(n), np.outer(a, a)]))
    Y = rng.standard_normal((200, n))  # no rank-one component: theta_2 hits zero
    Y = Y - np.outer(Y @ a, a) / (a @ a) * 0.3
    sol = reml_full(Y, basis)
    assert sol.converged
    assert sol.active == (1,) and sol.theta_hat[1] == 0.0


def test_householder_matches_explicit_complement():
    rng = np.random.default_rng(8)
    basis = random_basis(rng, 7, 2)
    X = rng.standard_normal((7, 2))
    y = rng.standard_normal(7)
    Bh, (yh,) = householder_reduce(basis.bases, X, y)
    Q = orthonormal_complement(X)
    theta = np.array([1.2, 0.4])
    p1 = RemlProblem(basis, Bh, y_reduced=yh)
    p2 = RemlProblem(basis, reduce_bases(basis.bases, Q), y_reduced=Q.T @ y)
    assert p1.objective(theta) == pytest.approx(p2.objective(theta), rel=1e-12)


def test_gene_model_validation():
    basis = CovarianceBasis(np.eye(4)[None])
    with pytest.raises(CovarianceModelError):
        GeneModel(np.ones((3, 1)), basis)
    model = GeneModel(np.ones((4, 1)), basis)
    with pytest.raises(CovarianceModelError):
        model.fit(np.ones(3))
    with pytest.raises(CovarianceModelError):
        reml_full(np.full((3, 4), np.nan), basis)


def test_infeasible_model_raises():
    # V(theta) = -theta I is never positive definite on theta >= 0
    basis = CovarianceBasis(-np.eye(3)[None])
    with pytest.raises(RemlError):
        reml_full(np.ones((4, 3)), basis)


def test_moment_match_exact_for_population_moments():
    rng = np.random.default_rng(9)
    basis = random_basis(rng, 5, 3)
    theta = random_theta(rng, 3)
    prob = RemlProblem(basis, basis.bases, S_reduced=assemble_V(basis, theta))
    np.testing.assert_allclose(moment_match(prob), theta, rtol=1e-10)
    sol = maximize(prob, moment_match(prob))
    np.testing.assert_allclose(sol.theta_hat, theta, rtol=1e-8)


def _grid_case(rng, op):
    n = 5
    basis = random_basis(rng, n, 2)
    Y = sample_rows(rng, assemble_V(basis, random_theta(rng, 2)), 25)
    if op == "full":
        sol = reml_full(Y, basis)
        return basis, second_moment(Y), np.eye(n), n, sol
    C = rng.standard_normal((n, 1))
    if op == "projected":
        P = projector(C)
        sol = reml_projected(Y, basis, P, warm_start=reml_full(Y, basis).theta_hat)
        return basis, second_moment(Y), np.eye(n) - P, n - 1, sol
    y = Y[0]
    if op == "gene":
        return basis, np.outer(y, y), np.eye(n) - projector(C), n - 1, reml_gene(y, C, basis)
    X = rng.standard_normal((n, 1))
    D = np.hstack([C, X])
    return basis, np.outer(y, y), np.eye(n) - projector(D), n - 2, reml_denoise(y, C, X, basis)


@pytest.mark.parametrize("op", ["full", "projected", "gene", "denoise"])
def test_grid_search_agreement(op):
    rng = np.random.default_rng({"full": 10, "projected": 11, "gene": 12, "denoise": 13}[op])
    basis, S, P, rank, sol = _grid_case(rng, op)
    hi = 4.0 * max(sol.theta_hat.max(), np.trace(S) / rank)
    best, _ = grid_search_b2(basis, S, P, rank, hi, size=80)
    assert sol.objective >= best - 1e-6
