import numpy as np
import pytest

from falco.cbcv import (
    FoldPlan,
    LeverageError,
    cbcv_select,
    default_K_max,
    leverages,
    loo_loss,
    loo_loss_refit,
    sample_folds,
    sample_haar_rotation,
)
from falco.covmodel import CovarianceBasis

import invariants
from invariants import _small_sim
from oracles import random_spd


@pytest.mark.parametrize("name", [k for k in invariants.REGISTRY if k.startswith("cbcv_")])
def test_invariant(name):
    ok, detail = invariants.REGISTRY[name]()
    assert ok, detail


def test_haar_one_by_one_is_a_sign():
    vals = {float(sample_haar_rotation(1, s)[0, 0]) for s in range(40)}
    assert vals == {-1.0, 1.0}


def test_haar_orthogonal_and_reproducible():
    Q = sample_haar_rotation(7, 3)
    np.testing.assert_allclose(Q.T @ Q, np.eye(7), atol=1e-12)
    np.testing.assert_array_equal(Q, sample_haar_rotation(7, 3))


def test_haar_second_moment():
    n, draws = 5, 4000
    rng = np.random.default_rng(0)
    x = np.array([sample_haar_rotation(n, rng)[0, 0] ** 2 for _ in range(draws)])
    se = x.std(ddof=1) / np.sqrt(draws)
    assert abs(x.mean() - 1 / n) <= 3 * se


def test_rank_zero_loss_is_whitened_norm():
    rng = np.random.default_rng(1)
    n = 5
    V = random_spd(rng, n)
    Q = sample_haar_rotation(n, rng)
    Yf = rng.standard_normal((4, n))
    w, U = np.linalg.eigh(V)
    Vih = (U / np.sqrt(w)) @ U.T
    ref = np.exp(np.mean(np.log(w))) * np.sum((Yf @ Vih @ Q) ** 2)
    assert loo_loss(Yf, V, np.zeros((n, 0)), Q) == pytest.approx(ref, rel=1e-12)
    assert loo_loss_refit(Yf, V, np.zeros((n, 0)), Q) == pytest.approx(ref, rel=1e-12)


def test_loo_scales_with_covariance():
    rng = np.random.default_rng(2)
    n = 6
    V = random_spd(rng, n)
    Q = sample_haar_rotation(n, rng)
    C = rng.standard_normal((n, 2))
    Yf = rng.standard_normal((5, n))
    # |cV|^{1/n} cancels the 1/c from whitening
    assert loo_loss(Yf, 3.0 * V, C, Q) == pytest.approx(loo_loss(Yf, V, C, Q), rel=1e-12)


def test_leverage_error_reports_sample():
    n = 4
    C = np.zeros((n, 1))
    C[2, 0] = 1.0
    with pytest.raises(LeverageError) as err:
        loo_loss(np.ones((3, n)), np.eye(n), C, np.eye(n))
    assert err.value.sample == 2 and err.value.h == pytest.approx(1.0)


def test_leverages_sum_to_rank():
    rng = np.random.default_rng(3)
    n = 8
    h = leverages(random_spd(rng, n), rng.standard_normal((n, 3)), sample_haar_rotation(n, rng))
    assert h.sum() == pytest.approx(3.0)
    assert np.all((h >= 0) & (h <= 1))


def test_fold_plan_validation():
    with pytest.raises(ValueError):
        FoldPlan(1, np.ones(5, dtype=int))
    with pytest.raises(ValueError):
        FoldPlan(2, np.array([1, 1, 3]))
    with pytest.raises(ValueError):
        FoldPlan(3, np.array([1, 2, 1, 2]))
    plan = FoldPlan(2, np.array([1, 2, 2, 1, 2]))
    np.testing.assert_array_equal(plan.test_rows(1), [0, 3])
    np.testing.assert_array_equal(plan.train_rows(1), [1, 2, 4])


def test_sample_folds_nonempty():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a = sample_folds(3, 3, rng)
        assert sorted(a.tolist()) == [1, 2, 3]
    with pytest.raises(ValueError):
        sample_folds(2, 3, rng)


def test_default_k_max():
    assert default_K_max(57, 2000, 0.5) == 29
    assert default_K_max(10, 7, 0.3) == 3


def test_pure_noise_selects_zero():
    n, p = 30, 500
    basis = CovarianceBasis(np.eye(n)[None])
    zeros = 0
    for rep in range(20):
        Y = np.random.default_rng(100 + rep).standard_normal((p, n))
        zeros += cbcv_select(Y, basis, seed=rep, K_max=5).K_hat == 0
    assert zeros >= 18


def test_recovers_planted_rank():
    data = _small_sim(seed=7, p=400, K=3)
    res = cbcv_select(data.Y, data.basis, seed=1, K_max=6)
    assert res.K_hat == 3
    assert res.losses.shape == (2, 7)
    np.testing.assert_allclose(res.total, res.losses.sum(axis=0))


def test_threads_do_not_change_result():
    data = _small_sim(seed=8, p=200)
    a = cbcv_select(data.Y, data.basis, seed=2, K_max=4, F=3)
    b = cbcv_select(data.Y, data.basis, seed=2, K_max=4, F=3, n_jobs=3)
    np.testing.assert_array_equal(a.losses, b.losses)


def test_argument_errors():
    data = _small_sim(seed=9, p=40)
    with pytest.raises(ValueError):
        cbcv_select(data.Y, data.basis, F=1)
    with pytest.raises(ValueError):
        cbcv_select(data.Y, data.basis, eta=1.0)
    with pytest.raises(ValueError):
        cbcv_select(data.Y[:5], data.basis, F=2, K_max=4, seed=0)
