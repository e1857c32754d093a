"""Panel Lasso estimators.

The two-penalty fit minimizes

    ||y - X beta - D c||^2 + 2 lam ||beta||_1 + 2 mu ||c||_1 .

Because ``mu / lam`` should scale like ``1 / sqrt(N)``, the common practical
route fixes ``mu = lam / sqrt(N)`` by rescaling the dummies with ``sqrt(N)``
and solving a single-penalty problem; :func:`fit_bic` selects ``lam`` along a
path by BIC and :func:`fit_adaptive` runs the reweighted second stage by
column rescaling.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .lasso_solver import (
    LassoSolution,
    SolverSettings,
    WeightedLassoProblem,
    kkt_residuals,
    lambda_grid,
    lambda_max,
    solve,
)
from .panel_model import (
    DesignMatrix,
    InvalidInputError,
    PanelDataset,
    TrueModel,
    assemble_design,
    dummy_apply,
    rescale_dummies,
    residual_sum_of_squares,
)

logger = logging.getLogger(__name__)

ESTIMATOR_TAGS = ("lasso", "adaptive_lasso", "ols_oracle", "ols_all")


class ConvergenceError(RuntimeError):
    """The coordinate descent solver hit ``max_sweeps`` before converging."""

    def __init__(self, message: str, solution: LassoSolution | None = None):
        super().__init__(message)
        self.solution = solution


class InfeasibleError(ValueError):
    """Least squares on all columns is not identified for this panel."""


class RankDeficientError(ValueError):
    """A least-squares design does not have full column rank."""


@dataclass(frozen=True)
class PenaltyPair:
    lam: float
    mu: float

    def __post_init__(self):
        for name in ("lam", "mu"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and nonnegative, got {v}")
            object.__setattr__(self, name, v)


@dataclass
class PanelFit:
    """Estimated ``(beta, c)`` with the penalties and diagnostics that produced it.

    For Lasso fits ``objective`` is the two-penalty objective at ``penalty``.
    For adaptive fits it is the weighted objective with weights
    ``lam / |beta_hat_j|`` and ``mu / |c_hat_i|``.  ``path`` holds the
    lambda grid, BIC values and model sizes when the fit was tuned by BIC.
    """

    beta_hat: NDArray
    c_hat: NDArray
    penalty: PenaltyPair | None
    objective: float
    estimator_tag: str
    bic: float | None = None
    kkt_max_violation: float = 0.0
    converged: bool = True
    warning: str | None = None
    path: dict | None = field(default=None, repr=False)

    @property
    def active_beta(self) -> NDArray:
        return np.flatnonzero(self.beta_hat)

    @property
    def active_c(self) -> NDArray:
        return np.flatnonzero(self.c_hat)

    @property
    def gamma_hat(self) -> NDArray:
        return np.concatenate([self.beta_hat, self.c_hat])

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.beta_hat) + np.count_nonzero(self.c_hat))


def lasso_objective(data: PanelDataset, beta: ArrayLike, c: ArrayLike, penalty: PenaltyPair) -> float:
    return (residual_sum_of_squares(data, beta, c)
            + 2 * penalty.lam * np.sum(np.abs(beta)) + 2 * penalty.mu * np.sum(np.abs(c)))


def bic_value(rss: float, n_obs: int, df: int) -> float:
    """``n ln(RSS/n) + df ln(n)``; ``-inf`` for a perfect fit."""
    with np.errstate(divide="ignore"):
        return float(n_obs * np.log(rss / n_obs) + df * np.log(n_obs))


def _covariate_factor(data: PanelDataset, penalty_factor: ArrayLike | None) -> NDArray:
    if penalty_factor is None:
        return np.ones(data.n_covariates)
    f = np.asarray(penalty_factor, dtype=float).ravel()
    if f.shape[0] != data.n_covariates or np.any(f < 0) or np.any(np.isnan(f)):
        raise InvalidInputError("penalty_factor must hold one nonnegative value per covariate")
    return f


def _check(sol: LassoSolution, what: str) -> None:
    if not sol.converged:
        raise ConvergenceError(
            f"{what}: no convergence after {sol.sweeps_used} sweeps "
            f"(max KKT violation {sol.kkt_max_violation:.3g})", sol)


def fit_panel_lasso(data: PanelDataset, penalty: PenaltyPair, *,
                    penalty_factor: ArrayLike | None = None,
                    settings: SolverSettings | None = None,
                    warm_start: ArrayLike | None = None) -> PanelFit:
    """Two-penalty panel Lasso at fixed ``(lam, mu)``.

    ``penalty_factor`` multiplies ``lam`` per covariate; a zero leaves that
    covariate unpenalized.
    """
    p = data.n_covariates
    factor = _covariate_factor(data, penalty_factor)
    w = np.concatenate([penalty.lam * factor, np.full(data.n_individuals, penalty.mu)])
    problem = WeightedLassoProblem(data.y, assemble_design(data), w)
    sol = solve(problem, settings, warm_start)
    _check(sol, "panel Lasso")
    beta, c = sol.gamma_hat[:p], sol.gamma_hat[p:]
    return PanelFit(beta_hat=beta, c_hat=c, penalty=penalty, objective=sol.objective,
                    estimator_tag="lasso", kkt_max_violation=sol.kkt_max_violation)


def _reduction_problem(data: PanelDataset, factor: NDArray) -> WeightedLassoProblem:
    design = rescale_dummies(assemble_design(data), data.n_individuals)
    w = np.concatenate([factor, np.ones(data.n_individuals)])
    return WeightedLassoProblem(data.y, design, w)


def _reduction_fit(data: PanelDataset, sol: LassoSolution, lam: float, factor: NDArray) -> PanelFit:
    p, root_n = data.n_covariates, np.sqrt(data.n_individuals)
    beta, c = sol.gamma_hat[:p].copy(), root_n * sol.gamma_hat[p:]
    penalty = PenaltyPair(lam, lam / root_n)
    obj = (residual_sum_of_squares(data, beta, c) + 2 * lam * np.sum(factor * np.abs(beta))
           + 2 * penalty.mu * np.sum(np.abs(c)))
    return PanelFit(beta_hat=beta, c_hat=c, penalty=penalty, objective=float(obj),
                    estimator_tag="lasso", kkt_max_violation=sol.kkt_max_violation,
                    converged=sol.converged)


def fit_single_penalty_reduction(data: PanelDataset, lam: float, *,
                                 penalty_factor: ArrayLike | None = None,
                                 settings: SolverSettings | None = None) -> PanelFit:
    """Panel Lasso with ``mu = lam / sqrt(N)`` via the rescaled-dummy problem.

    Solves the uniform-weight Lasso on ``(X, sqrt(N) D)`` and maps the dummy
    coefficients back with ``c = sqrt(N) * c_tilde``.
    """
    if not lam >= 0:
        raise InvalidInputError("lam must be nonnegative")
    factor = _covariate_factor(data, penalty_factor)
    problem = _reduction_problem(data, factor)
    sol = solve(problem.with_weights(lam * problem.weights), settings)
    _check(sol, "single-penalty reduction")
    return _reduction_fit(data, sol, lam, factor)


def _bic_path(problem: WeightedLassoProblem, n_obs: int, lambdas: NDArray,
              settings: SolverSettings | None, max_explained: float):
    """Warm-started path; returns solutions, RSS, df, BIC per grid point.

    The path stops early (remaining points skipped) once the fit reaches
    ``n_obs`` nonzero coefficients or explains more than ``max_explained``
    of ``||y||^2``, the usual guard against saturated fits whose BIC
    degenerates to minus infinity.
    """
    tss = float(problem.response @ problem.response)
    sols, rss, dfs, bics = [], [], [], []
    warm = None
    for lam in lambdas:
        sol = solve(problem.with_weights(lam * problem.weights), settings, warm)
        _check(sol, f"BIC path at lambda={lam:.6g}")
        r = problem.residual(sol.gamma_hat)
        rss_k = float(r @ r)
        df = int(np.count_nonzero(sol.gamma_hat))
        sols.append(sol)
        rss.append(rss_k)
        dfs.append(df)
        bics.append(bic_value(rss_k, n_obs, df))
        warm = sol.gamma_hat
        if df >= n_obs or (tss > 0 and rss_k <= (1.0 - max_explained) * tss):
            break
    return sols, np.array(rss), np.array(dfs), np.array(bics)


def _select(bics: NDArray) -> int:
    # np.argmin keeps the first minimizer, i.e. the largest lambda on ties.
    finite = np.where(np.isfinite(bics), bics, np.inf)
    if not np.any(np.isfinite(finite)):
        return 0
    return int(np.argmin(finite))


def _resolve_grid(problem: WeightedLassoProblem, n_points: int, ratio: float,
                  lambdas: ArrayLike | None) -> NDArray:
    if lambdas is not None:
        lambdas = np.sort(np.asarray(lambdas, dtype=float).ravel())[::-1]
        if lambdas.size == 0 or np.any(lambdas < 0):
            raise InvalidInputError("lambdas must be a nonempty set of nonnegative values")
        return lambdas
    if n_points == 1:
        return np.array([lambda_max(problem)])
    return lambda_grid(lambda_max(problem), n_points, ratio)


def fit_bic(data: PanelDataset, n_points: int = 100, ratio: float = 1e-3, *,
            lambdas: ArrayLike | None = None,
            penalty_factor: ArrayLike | None = None,
            settings: SolverSettings | None = None,
            max_explained: float = 0.999) -> PanelFit:
    """Lasso with ``lam`` chosen by BIC along a warm-started path.

    ``BIC(lam) = NT ln(RSS/NT) + k ln(NT)`` with ``k`` the number of nonzero
    coefficients in ``(beta, c)``.  Ties go to the larger ``lam``.  The grid
    runs from the ``lambda_max`` of the rescaled problem down to
    ``ratio * lambda_max`` unless ``lambdas`` is given.
    """
    if data.n_obs and not np.any(data.y):
        raise InvalidInputError("response is identically zero")
    factor = _covariate_factor(data, penalty_factor)
    problem = _reduction_problem(data, factor)
    grid = _resolve_grid(problem, n_points, ratio, lambdas)
    sols, rss, dfs, bics = _bic_path(problem, data.n_obs, grid, settings, max_explained)
    k = _select(bics)
    fit = _reduction_fit(data, sols[k], float(grid[k]), factor)
    fit.bic = float(bics[k])
    fit.path = {"lambdas": grid[:len(sols)].copy(), "bic": bics, "df": dfs, "rss": rss,
                "selected": k}
    return fit


def _adaptive_weights(fit: PanelFit, penalty: PenaltyPair) -> NDArray:
    with np.errstate(divide="ignore"):
        wb = np.where(fit.beta_hat != 0, penalty.lam / np.abs(fit.beta_hat), np.inf)
        wc = np.where(fit.c_hat != 0, penalty.mu / np.abs(fit.c_hat), np.inf)
    return np.concatenate([wb, wc])


def adaptive_objective(data: PanelDataset, first_stage: PanelFit, penalty: PenaltyPair,
                       beta: NDArray, c: NDArray) -> float:
    w = _adaptive_weights(first_stage, penalty)
    g = np.concatenate([beta, c])
    nz = g != 0
    return float(residual_sum_of_squares(data, beta, c) + 2 * np.sum(w[nz] * np.abs(g[nz])))


def adaptive_kkt(data: PanelDataset, first_stage: PanelFit, penalty: PenaltyPair,
                 beta: NDArray, c: NDArray) -> NDArray:
    """KKT residuals of ``(beta, c)`` for the explicitly weighted adaptive problem."""
    problem = WeightedLassoProblem(data.y, assemble_design(data),
                                   _adaptive_weights(first_stage, penalty))
    return kkt_residuals(problem, np.concatenate([beta, c]))


def _zero_fit(data: PanelDataset, tag: str, **kw) -> PanelFit:
    return PanelFit(beta_hat=np.zeros(data.n_covariates), c_hat=np.zeros(data.n_individuals),
                    objective=residual_sum_of_squares(data, np.zeros(data.n_covariates),
                                                      np.zeros(data.n_individuals)),
                    estimator_tag=tag, **kw)


def _adaptive_design(data: PanelDataset, first_stage: PanelFit):
    kb, kc = first_stage.active_beta, first_stage.active_c
    root_n = np.sqrt(data.n_individuals)
    col_scale = np.concatenate([first_stage.beta_hat[kb], root_n * first_stage.c_hat[kc]])
    design = DesignMatrix(data.x[:, kb] * first_stage.beta_hat[kb], data.n_individuals,
                          data.n_periods, kc, root_n * first_stage.c_hat[kc])
    return design, kb, kc, col_scale


def fit_adaptive(data: PanelDataset, first_stage: PanelFit, n_points: int = 100,
                 ratio: float = 1e-3, *, lambdas: ArrayLike | None = None,
                 penalty_factor: ArrayLike | None = None,
                 settings: SolverSettings | None = None,
                 max_explained: float = 0.999) -> PanelFit:
    """Adaptive second stage with ``lam`` chosen by BIC.

    Coefficients zeroed by ``first_stage`` are dropped.  Kept columns are
    rescaled, ``x_j * beta_hat_j`` and ``sqrt(N) c_hat_i d_i``, a
    uniform-weight Lasso is run on the reduced design and the coefficients
    are mapped back.  In original coordinates this is the weighted Lasso
    with weights ``lam / |beta_hat_j|`` and ``(lam / sqrt(N)) / |c_hat_i|``.
    ``penalty_factor`` further multiplies the covariate weights (zero keeps
    a covariate unpenalized).
    """
    factor = _covariate_factor(data, penalty_factor)
    design, kb, kc, col_scale = _adaptive_design(data, first_stage)
    if col_scale.size == 0:
        warnings.warn("first stage selected nothing; adaptive fit is identically zero",
                      RuntimeWarning, stacklevel=2)
        return _zero_fit(data, "adaptive_lasso", penalty=None,
                         warning="empty first stage")
    problem = WeightedLassoProblem(data.y, design,
                                   np.concatenate([factor[kb], np.ones(kc.size)]))
    if not np.any(problem.xty()):
        return _zero_fit(data, "adaptive_lasso", penalty=None, warning="zero response")
    grid = _resolve_grid(problem, n_points, ratio, lambdas)
    sols, rss, dfs, bics = _bic_path(problem, data.n_obs, grid, settings, max_explained)
    k = _select(bics)
    coef = sols[k].gamma_hat * col_scale
    beta = np.zeros(data.n_covariates)
    c = np.zeros(data.n_individuals)
    beta[kb] = coef[:kb.size]
    c[kc] = coef[kb.size:]
    lam = float(grid[k])
    penalty = PenaltyPair(lam, lam / np.sqrt(data.n_individuals))
    kkt = adaptive_kkt(data, first_stage, penalty, beta, c)
    return PanelFit(beta_hat=beta, c_hat=c, penalty=penalty,
                    objective=adaptive_objective(data, first_stage, penalty, beta, c),
                    estimator_tag="adaptive_lasso", bic=float(bics[k]),
                    kkt_max_violation=float(np.max(kkt, initial=0.0)),
                    path={"lambdas": grid[:len(sols)].copy(), "bic": bics, "df": dfs,
                          "rss": rss, "selected": k})


def fit_adaptive_weighted(data: PanelDataset, first_stage: PanelFit, penalty: PenaltyPair, *,
                          settings: SolverSettings | None = None) -> PanelFit:
    """Adaptive fit at fixed ``(lam, mu)`` with explicit weights.

    Minimizes ``||y - Z g||^2 + 2 sum_j w_j |g_j|`` with
    ``w = lam / |beta_hat|`` and ``mu / |c_hat|`` (infinite where the first
    stage is zero).
    """
    w = _adaptive_weights(first_stage, penalty)
    problem = WeightedLassoProblem(data.y, assemble_design(data), w)
    sol = solve(problem, settings)
    _check(sol, "weighted adaptive Lasso")
    p = data.n_covariates
    return PanelFit(beta_hat=sol.gamma_hat[:p], c_hat=sol.gamma_hat[p:], penalty=penalty,
                    objective=sol.objective, estimator_tag="adaptive_lasso",
                    kkt_max_violation=sol.kkt_max_violation)


def _least_squares(data: PanelDataset, cols_beta: NDArray, cols_c: NDArray, tag: str) -> PanelFit:
    cols_beta = np.asarray(cols_beta, dtype=np.int64)
    cols_c = np.asarray(cols_c, dtype=np.int64)
    design = DesignMatrix(data.x[:, cols_beta], data.n_individuals, data.n_periods, cols_c)
    beta = np.zeros(data.n_covariates)
    c = np.zeros(data.n_individuals)
    k = cols_beta.size + cols_c.size
    if k:
        z = design.toarray()
        rank = np.linalg.matrix_rank(z)
        if rank < k:
            raise RankDeficientError(f"{tag}: design has rank {rank} < {k} columns")
        coef = np.linalg.lstsq(z, data.y, rcond=None)[0]
        beta[cols_beta] = coef[:cols_beta.size]
        c[cols_c] = coef[cols_beta.size:]
    return PanelFit(beta_hat=beta, c_hat=c, penalty=None,
                    objective=residual_sum_of_squares(data, beta, c), estimator_tag=tag)


def ols_oracle(data: PanelDataset, true_model: TrueModel) -> PanelFit:
    """Least squares on the true supports only."""
    if true_model.s1 + true_model.s2 > data.n_obs:
        raise RankDeficientError("oracle support exceeds the number of observations")
    return _least_squares(data, true_model.support_beta, true_model.support_c, "ols_oracle")


def ols_all(data: PanelDataset) -> PanelFit:
    """Unpenalized least squares on ``Z = (X, D)``."""
    p, n = data.n_covariates, data.n_individuals
    if p + n > data.n_obs:
        raise InfeasibleError(f"p + N = {p + n} exceeds NT = {data.n_obs}")
    x = data.x
    const = np.all(np.isclose(x, x[:1], rtol=0, atol=1e-12 * (1 + np.abs(x[:1]))), axis=0)
    if np.any(const):
        raise RankDeficientError(
            f"covariate column(s) {np.flatnonzero(const).tolist()} are constant and "
            "collinear with the individual dummies")
    return _least_squares(data, np.arange(p), np.arange(n), "ols_all")


def predict(fit: PanelFit, data: PanelDataset) -> NDArray:
    return data.x @ fit.beta_hat + dummy_apply(fit.c_hat, data.n_periods)
