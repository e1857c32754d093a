import numpy as np
import pytest
from sklearn.base import clone

from panellasso import AdaptivePanelLasso, PanelLasso, PanelLassoBIC, fit_bic
from panellasso.estimators import panel_from_groups
from panellasso.panel_model import InvalidInputError


@pytest.fixture
def shuffled(small_panel):
    data = small_panel[0]
    groups = np.repeat(np.arange(data.n_individuals), data.n_periods)
    perm = np.random.default_rng(3).permutation(groups.size)
    return data, data.x[perm], data.y[perm], groups[perm], perm


def test_panel_from_groups_restores_order(shuffled):
    data, X, y, g, perm = shuffled
    rebuilt, order, labels = panel_from_groups(X, y, g)
    np.testing.assert_array_equal(labels, np.arange(data.n_individuals))
    np.testing.assert_array_equal(np.sort(rebuilt.y), np.sort(data.y))
    np.testing.assert_array_equal(g[order], np.repeat(labels, data.n_periods))


def test_unbalanced_groups_rejected():
    X = np.ones((5, 2))
    with pytest.raises(InvalidInputError, match="unbalanced"):
        panel_from_groups(X, np.arange(5.0), [0, 0, 0, 1, 1])
    with pytest.raises(InvalidInputError, match="groups is required"):
        PanelLasso().fit(X, np.arange(5.0))


def test_bic_estimator_matches_function(small_panel):
    data = small_panel[0]
    groups = np.repeat(np.arange(data.n_individuals), data.n_periods)
    est = PanelLassoBIC().fit(data.x, data.y, groups)
    ref = fit_bic(data)
    np.testing.assert_allclose(est.coef_, ref.beta_hat, atol=1e-10)
    np.testing.assert_allclose(est.fixed_effects_, ref.c_hat, atol=1e-10)
    assert est.lambda_ == pytest.approx(ref.penalty.lam)


def test_predict_and_unknown_groups(small_panel):
    data = small_panel[0]
    groups = np.repeat(np.arange(data.n_individuals), data.n_periods)
    est = PanelLasso(lam=0.5).fit(data.x, data.y, groups)
    full = est.predict(data.x, groups)
    np.testing.assert_allclose(full, data.x @ est.coef_ + np.repeat(est.fixed_effects_, data.n_periods))
    unseen = est.predict(data.x[:3], [99, 99, 99])
    np.testing.assert_allclose(unseen, data.x[:3] @ est.coef_)
    assert est.score(data.x, data.y, groups) > 0.5
    with pytest.raises(ValueError, match="features"):
        est.predict(data.x[:, :2])


def test_params_and_clone():
    est = AdaptivePanelLasso(n_lambdas=30, lambda_ratio=1e-2)
    params = est.get_params()
    assert params["n_lambdas"] == 30 and params["lambda_ratio"] == 1e-2
    twin = clone(est).set_params(n_lambdas=10)
    assert twin.n_lambdas == 10 and est.n_lambdas == 30


def test_adaptive_estimator(small_panel):
    data = small_panel[0]
    groups = np.repeat(np.arange(data.n_individuals), data.n_periods)
    est = AdaptivePanelLasso().fit(data.x, data.y, groups)
    assert est.first_stage_.beta_hat.shape == est.coef_.shape
    zero_first = est.first_stage_.beta_hat == 0
    assert np.all(est.coef_[zero_first] == 0)


def test_explicit_mu(small_panel):
    data = small_panel[0]
    groups = np.repeat(np.arange(data.n_individuals), data.n_periods)
    a = PanelLasso(lam=0.7).fit(data.x, data.y, groups)
    b = PanelLasso(lam=0.7, mu=0.7 / np.sqrt(data.n_individuals)).fit(data.x, data.y, groups)
    np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-7)
