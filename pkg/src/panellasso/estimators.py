"""scikit-learn style wrappers around the panel Lasso routines.

Rows are matched to individuals through ``groups``.  Within an individual,
row order is taken as time order, and every individual needs the same number
of rows.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .lasso_solver import SolverSettings
from .panel_lasso import (
    PenaltyPair,
    fit_adaptive,
    fit_bic,
    fit_panel_lasso,
    fit_single_penalty_reduction,
)
from .panel_model import InvalidInputError, PanelDataset


def panel_from_groups(X, y, groups):
    """Reorder ``(X, y)`` individual-major and return ``(data, order, labels)``.

    ``order`` maps dataset rows back to input rows.  Within a group the input
    order is kept (stable sort).
    """
    X, y = check_X_y(X, y, y_numeric=True)
    if groups is None:
        raise InvalidInputError("groups is required: one individual label per row")
    groups = np.asarray(groups).ravel()
    if groups.shape[0] != X.shape[0]:
        raise InvalidInputError(f"groups has {groups.shape[0]} entries, X has {X.shape[0]} rows")
    labels, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    if np.any(counts != counts[0]):
        bad = labels[np.flatnonzero(counts != np.bincount(counts).argmax())[0]]
        raise InvalidInputError(f"unbalanced panel: individual {bad!r} has a different row count")
    order = np.argsort(inverse, kind="stable")
    data = PanelDataset(labels.size, int(counts[0]), y[order], X[order])
    return data, order, labels


class _PanelBase(RegressorMixin, BaseEstimator):
    def _settings(self):
        return SolverSettings(self.tol, self.max_sweeps)

    def _store(self, fit, labels):
        self.fit_ = fit
        self.coef_ = fit.beta_hat
        self.fixed_effects_ = fit.c_hat
        self.groups_ = labels
        self.n_features_in_ = fit.beta_hat.shape[0]
        return self

    def predict(self, X, groups=None):
        """``X coef_ + c_g``; rows of unseen (or missing) groups get no effect."""
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = X @ self.coef_
        if groups is not None:
            groups = np.asarray(groups).ravel()
            pos = np.searchsorted(self.groups_, groups)
            pos = np.clip(pos, 0, self.groups_.size - 1)
            known = self.groups_[pos] == groups
            out[known] += self.fixed_effects_[pos[known]]
        return out

    def score(self, X, y, groups=None, sample_weight=None):
        from sklearn.metrics import r2_score
        return r2_score(y, self.predict(X, groups), sample_weight=sample_weight)


class PanelLasso(_PanelBase):
    """Panel Lasso at fixed penalties.

    ``mu=None`` uses ``lam / sqrt(N)``.
    """

    def __init__(self, lam=1.0, mu=None, penalty_factor=None, tol=1e-8, max_sweeps=10_000):
        self.lam = lam
        self.mu = mu
        self.penalty_factor = penalty_factor
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y, groups=None):
        data, _, labels = panel_from_groups(X, y, groups)
        if self.mu is None:
            fit = fit_single_penalty_reduction(data, self.lam, penalty_factor=self.penalty_factor,
                                               settings=self._settings())
        else:
            fit = fit_panel_lasso(data, PenaltyPair(self.lam, self.mu),
                                  penalty_factor=self.penalty_factor, settings=self._settings())
        return self._store(fit, labels)


class PanelLassoBIC(_PanelBase):
    """Panel Lasso with ``lam`` picked by BIC and ``mu = lam / sqrt(N)``."""

    def __init__(self, n_lambdas=100, lambda_ratio=1e-3, penalty_factor=None,
                 tol=1e-8, max_sweeps=10_000):
        self.n_lambdas = n_lambdas
        self.lambda_ratio = lambda_ratio
        self.penalty_factor = penalty_factor
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y, groups=None):
        data, _, labels = panel_from_groups(X, y, groups)
        fit = fit_bic(data, self.n_lambdas, self.lambda_ratio,
                      penalty_factor=self.penalty_factor, settings=self._settings())
        self.lambda_ = fit.penalty.lam
        return self._store(fit, labels)


class AdaptivePanelLasso(_PanelBase):
    """Two-step adaptive panel Lasso, both stages tuned by BIC.

    After fitting, ``first_stage_`` holds the initial Lasso fit.
    """

    def __init__(self, n_lambdas=100, lambda_ratio=1e-3, penalty_factor=None,
                 tol=1e-8, max_sweeps=10_000):
        self.n_lambdas = n_lambdas
        self.lambda_ratio = lambda_ratio
        self.penalty_factor = penalty_factor
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y, groups=None):
        data, _, labels = panel_from_groups(X, y, groups)
        first = fit_bic(data, self.n_lambdas, self.lambda_ratio,
                        penalty_factor=self.penalty_factor, settings=self._settings())
        fit = fit_adaptive(data, first, self.n_lambdas, self.lambda_ratio,
                           penalty_factor=self.penalty_factor, settings=self._settings())
        self.first_stage_ = first
        self.lambda_ = None if fit.penalty is None else fit.penalty.lam
        return self._store(fit, labels)
