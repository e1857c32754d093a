import warnings

import numpy as np
import pytest

from conftest import make_panel
from oracles import dense_dummies, normal_equations
from panellasso.lasso_solver import WeightedLassoProblem, kkt_residuals, lambda_max
from panellasso.panel_lasso import (
    InfeasibleError,
    PanelFit,
    PenaltyPair,
    RankDeficientError,
    _reduction_problem,
    adaptive_kkt,
    bic_value,
    fit_adaptive,
    fit_adaptive_weighted,
    fit_bic,
    fit_panel_lasso,
    fit_single_penalty_reduction,
    lasso_objective,
    ols_all,
    ols_oracle,
    predict,
)
from panellasso.panel_model import InvalidInputError, PanelDataset, TrueModel
from panellasso.simulation import generate_panel, preset


def dense_z(data):
    return np.hstack([data.x, dense_dummies(data.n_individuals, data.n_periods)])


def test_penalty_pair_validation():
    with pytest.raises(InvalidInputError):
        PenaltyPair(-1.0, 0.0)
    with pytest.raises(InvalidInputError):
        PenaltyPair(1.0, np.inf)


def test_zero_penalty_is_least_squares(small_panel):
    data, _ = small_panel
    fit = fit_panel_lasso(data, PenaltyPair(0.0, 0.0))
    ls = np.linalg.lstsq(dense_z(data), data.y, rcond=None)[0]
    np.testing.assert_allclose(fit.gamma_hat, ls, atol=1e-7)


def test_large_penalty_gives_zero(small_panel):
    data, _ = small_panel
    z = dense_z(data)
    g = np.abs(z.T @ data.y)
    fit = fit_panel_lasso(data, PenaltyPair(g[:4].max(), g[4:].max()))
    assert not np.any(fit.gamma_hat)
    assert fit.n_nonzero == 0 and fit.active_beta.size == 0


def test_fit_objective_and_kkt(small_panel):
    data, _ = small_panel
    pen = PenaltyPair(3.0, 2.0)
    fit = fit_panel_lasso(data, pen)
    assert fit.objective == pytest.approx(lasso_objective(data, fit.beta_hat, fit.c_hat, pen),
                                          rel=1e-10)
    w = np.r_[np.full(4, 3.0), np.full(5, 2.0)]
    res = kkt_residuals(WeightedLassoProblem(data.y, dense_z(data), w), fit.gamma_hat)
    assert res.max() <= 1e-8 * max(1, np.abs(dense_z(data).T @ data.y).max())
    np.testing.assert_array_equal(fit.active_beta, np.flatnonzero(fit.beta_hat))
    np.testing.assert_array_equal(fit.active_c, np.flatnonzero(fit.c_hat))


@pytest.mark.parametrize("seed", range(5))
def test_reduction_equivalence(seed):
    r = np.random.default_rng(seed)
    data, _ = make_panel(r, n=int(r.integers(2, 8)), t=int(r.integers(2, 6)), p=5)
    lam = float(r.uniform(0.5, 5))
    a = fit_panel_lasso(data, PenaltyPair(lam, lam / np.sqrt(data.n_individuals)))
    b = fit_single_penalty_reduction(data, lam)
    np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-8)
    np.testing.assert_allclose(a.c_hat, b.c_hat, atol=1e-8)
    assert b.penalty.mu == pytest.approx(lam / np.sqrt(data.n_individuals))


def test_reduction_single_individual(rng):
    data, _ = make_panel(rng, n=1, t=12, p=3, s2=1)
    a = fit_panel_lasso(data, PenaltyPair(2.0, 2.0))
    b = fit_single_penalty_reduction(data, 2.0)
    np.testing.assert_allclose(a.gamma_hat, b.gamma_hat, atol=1e-10)


def test_reduction_at_lambda_max(small_panel):
    data, _ = small_panel
    lmax = lambda_max(_reduction_problem(data, np.ones(data.n_covariates)))
    assert not np.any(fit_single_penalty_reduction(data, lmax).gamma_hat)


def test_bic_value():
    assert bic_value(50.0, 100, 3) == pytest.approx(100 * np.log(0.5) + 3 * np.log(100))
    assert bic_value(0.0, 10, 2) == -np.inf


def test_bic_pure_noise():
    r = np.random.default_rng(7)
    data = PanelDataset(10, 10, 5 * r.standard_normal(100), r.standard_normal((100, 20)))
    fit = fit_bic(data)
    assert fit.n_nonzero <= 3
    path = fit.path
    assert fit.bic <= path["bic"][-1]
    assert fit.bic == path["bic"][path["selected"]]


def test_bic_single_grid_point(small_panel):
    data, _ = small_panel
    fit = fit_bic(data, lambdas=[1.5])
    ref = fit_single_penalty_reduction(data, 1.5)
    np.testing.assert_allclose(fit.gamma_hat, ref.gamma_hat, atol=1e-8)
    assert fit.penalty.lam == 1.5 and fit.path["selected"] == 0


def test_bic_path_endpoints(small_panel):
    data, _ = small_panel
    fit = fit_bic(data, n_points=30)
    df = fit.path["df"]
    assert df[0] == 0 and df[-1] >= df[0]
    assert fit.path["lambdas"][0] == pytest.approx(fit.path["lambdas"].max())


def test_bic_ties_prefer_larger_lambda():
    r = np.random.default_rng(3)
    data = PanelDataset(2, 3, r.standard_normal(6), np.zeros((6, 1)))
    # no covariate signal and duplicate grid points give identical BIC values
    fit = fit_bic(data, lambdas=[100.0, 100.0, 50.0])
    assert fit.path["selected"] == 0


def test_bic_rejects_zero_response():
    data = PanelDataset(2, 2, np.zeros(4), np.ones((4, 1)))
    with pytest.raises(InvalidInputError):
        fit_bic(data)


def test_bic_recovers_exp_f_support():
    cfg = preset("F")
    hits = 0
    for i in range(40):
        data, truth, _ = generate_panel(cfg, i)
        fit = fit_bic(data)
        hits += set(truth.support_beta) <= set(fit.active_beta)
    assert hits / 40 >= 0.95


def test_adaptive_zero_first_stage(small_panel):
    data, _ = small_panel
    zero = PanelFit(np.zeros(4), np.zeros(5), None, 0.0, "lasso")
    with pytest.warns(RuntimeWarning):
        fit = fit_adaptive(data, zero)
    assert not np.any(fit.gamma_hat) and fit.warning == "empty first stage"


def test_adaptive_exact_first_stage(rng):
    x = rng.standard_normal((40, 6))
    beta = np.array([1.0, 0, -2.0, 0, 0, 0.5])
    c = np.array([1.0, 0, 0, -1.0, 0, 0, 0, 0])
    data = PanelDataset(8, 5, x @ beta + np.repeat(c, 5), x)
    first = PanelFit(beta.copy(), c.copy(), None, 0.0, "lasso")
    fit = fit_adaptive(data, first, ratio=1e-8, max_explained=1.0)
    end = fit_adaptive(data, first, lambdas=[fit.path["lambdas"][-1]])
    np.testing.assert_allclose(end.beta_hat, beta, atol=1e-6)
    np.testing.assert_allclose(end.c_hat, c, atol=1e-6)


def test_adaptive_support_shrinks_and_matches_weighted(small_panel):
    data, _ = small_panel
    first = fit_bic(data)
    ada = fit_adaptive(data, first)
    assert set(ada.active_beta) <= set(first.active_beta)
    assert set(ada.active_c) <= set(first.active_c)
    # column rescaling must satisfy the explicitly weighted optimality conditions
    kkt = adaptive_kkt(data, first, ada.penalty, ada.beta_hat, ada.c_hat)
    assert kkt.max() <= 1e-6 * max(1.0, np.abs(dense_z(data).T @ data.y).max())
    direct = fit_adaptive_weighted(data, first, ada.penalty)
    np.testing.assert_allclose(direct.gamma_hat, ada.gamma_hat, atol=1e-6)


def test_adaptive_unpenalized_column(small_panel):
    data, _ = small_panel
    factor = np.array([1.0, 1.0, 1.0, 0.0])
    first = fit_bic(data, penalty_factor=factor)
    assert first.beta_hat[3] != 0
    ada = fit_adaptive(data, first, penalty_factor=factor)
    assert ada.beta_hat[3] != 0


def test_ols_oracle_noise_free(rng):
    x = rng.standard_normal((30, 5))
    beta = np.array([0, 2.0, 0, 0, -1.0])
    c = np.array([0, 0, 3.0, 0, 0, 1.0])
    data = PanelDataset(6, 5, x @ beta + np.repeat(c, 5), x)
    fit = ols_oracle(data, TrueModel(beta, c))
    np.testing.assert_allclose(fit.beta_hat, beta, atol=1e-10)
    np.testing.assert_allclose(fit.c_hat, c, atol=1e-10)
    assert fit.estimator_tag == "ols_oracle"


def test_ols_oracle_empty_support(small_panel):
    data, _ = small_panel
    fit = ols_oracle(data, TrueModel(np.zeros(4), np.zeros(5)))
    assert not np.any(fit.gamma_hat)
    assert fit.objective == pytest.approx(data.y @ data.y)


def test_ols_oracle_normal_equations(small_panel):
    data, truth = small_panel
    fit = ols_oracle(data, truth)
    z = dense_z(data)[:, np.r_[truth.support_beta, 4 + truth.support_c]]
    coef = normal_equations(z, data.y)
    np.testing.assert_allclose(np.r_[fit.beta_hat[truth.support_beta], fit.c_hat[truth.support_c]],
                               coef, atol=1e-9)


def test_ols_oracle_rank_deficient(rng):
    x = rng.standard_normal((12, 2))
    x[:, 1] = x[:, 0]
    data = PanelDataset(3, 4, rng.standard_normal(12), x)
    with pytest.raises(RankDeficientError):
        ols_oracle(data, TrueModel([1.0, 1.0], [0, 0, 0]))


def test_ols_all_infeasible():
    data, _, _ = generate_panel(preset("G"), 0)
    with pytest.raises(InfeasibleError):
        ols_all(data)


def test_ols_all_square_system(rng):
    data = PanelDataset(2, 2, rng.standard_normal(4), rng.standard_normal((4, 2)))
    fit = ols_all(data)
    assert fit.objective == pytest.approx(0.0, abs=1e-20)


def test_ols_all_oracle(small_panel):
    data, _ = small_panel
    fit = ols_all(data)
    np.testing.assert_allclose(fit.gamma_hat, normal_equations(dense_z(data), data.y), atol=1e-9)


def test_ols_all_rejects_constant_column(rng):
    x = np.c_[rng.standard_normal(12), np.ones(12)]
    with pytest.raises(RankDeficientError):
        ols_all(PanelDataset(3, 4, rng.standard_normal(12), x))


def test_objective_certificate(small_panel):
    data, truth = small_panel
    pen = PenaltyPair(2.0, 1.0)
    fit = fit_panel_lasso(data, pen)
    assert fit.objective <= lasso_objective(data, truth.beta_star, truth.c_star, pen) + 1e-9


def test_predict(small_panel):
    data, _ = small_panel
    fit = fit_panel_lasso(data, PenaltyPair(1.0, 1.0))
    np.testing.assert_allclose(predict(fit, data), dense_z(data) @ fit.gamma_hat)


def test_no_warnings_on_regular_fit(small_panel):
    data, _ = small_panel
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_adaptive(data, fit_bic(data))
