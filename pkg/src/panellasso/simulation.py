"""Monte Carlo designs, metrics and the replication engine.

Each replication draws its own generator from ``SeedSequence([seed, index])``
so results do not depend on execution order or on the number of workers;
aggregation always walks replications in index order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from . import theory
from .panel_lasso import (
    InfeasibleError,
    PanelFit,
    RankDeficientError,
    fit_adaptive,
    fit_adaptive_weighted,
    fit_bic,
    fit_panel_lasso,
    ols_all,
    ols_oracle,
)
from .lasso_solver import SolverSettings
from .panel_model import InvalidInputError, PanelDataset, TrueModel, dummy_apply

logger = logging.getLogger(__name__)

ESTIMATORS = ("lasso", "adaptive", "ols_oracle", "ols_all")
ESTIMATOR_LABELS = {"lasso": "Lasso", "adaptive": "ALasso", "ols_oracle": "OLSO",
                    "ols_all": "OLSA"}
# Near-saturated path points can need many sweeps; cheap next to a failed rep.
PATH_SETTINGS = SolverSettings(max_sweeps=50_000)
DISTRIBUTIONS = ("gaussian", "heavy_tailed")
METRIC_COLUMNS = ("MSE(beta)", "MSE(c)", "Sub(beta)", "Sub(c)", "Spar(beta)", "Spar(c)",
                  "nnz_beta", "nnz_c")


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo design plus the estimators to run on it.

    ``t_df`` is the degrees of freedom of the standardized Student-t used for
    heavy-tailed draws.  ``mse_mode`` chooses between the mean of the l2
    errors (``"mean_norm"``) and the root of the mean squared error
    (``"root_mean_square"``).  ``bic_grid_ratio=None`` picks ``1e-3`` when
    ``p + n <= n t`` and ``1e-2`` otherwise, mirroring the usual glmnet
    defaults; see :attr:`grid_ratio`.
    """

    n: int
    t: int
    p: int
    s1: int
    s2: int
    beta_value: float = 1.0
    c_value: float = 1.0
    rho: float = 0.75
    covariate_dist: str = "gaussian"
    error_dist: str = "gaussian"
    replications: int = 1000
    seed: int = 20240101
    estimators: tuple[str, ...] = ESTIMATORS
    bic_grid_size: int = 100
    bic_grid_ratio: float | None = None
    t_df: float = 3.0
    mse_mode: str = "mean_norm"
    diagnostics: bool = True
    theory_a: float = math.e
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if min(self.n, self.t) < 1 or self.p < 0:
            raise InvalidInputError("need n, t >= 1 and p >= 0")
        if not 0 <= self.s1 <= self.p:
            raise InvalidInputError(f"s1={self.s1} must lie in [0, p={self.p}]")
        if not 0 <= self.s2 <= self.n:
            raise InvalidInputError(f"s2={self.s2} must lie in [0, n={self.n}]")
        if not 0 <= self.rho < 1:
            raise InvalidInputError("rho must lie in [0, 1)")
        if self.replications < 1:
            raise InvalidInputError("replications must be at least 1")
        for d in (self.covariate_dist, self.error_dist):
            if d not in DISTRIBUTIONS:
                raise InvalidInputError(f"unknown distribution {d!r}; choose from {DISTRIBUTIONS}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise InvalidInputError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        if "adaptive" in self.estimators and "lasso" not in self.estimators:
            raise InvalidInputError("the adaptive estimator needs the lasso first stage")
        if self.t_df <= 2:
            raise InvalidInputError("t_df must exceed 2 for a finite variance")
        if self.bic_grid_ratio is not None and not 0 < self.bic_grid_ratio < 1:
            raise InvalidInputError("bic_grid_ratio must lie in (0, 1)")
        if self.bic_grid_size < 2:
            raise InvalidInputError("bic_grid_size must be at least 2")
        if self.mse_mode not in ("mean_norm", "root_mean_square"):
            raise InvalidInputError(f"unknown mse_mode {self.mse_mode!r}")

    @property
    def grid_ratio(self) -> float:
        if self.bic_grid_ratio is not None:
            return float(self.bic_grid_ratio)
        return 1e-3 if self.p + self.n <= self.n * self.t else 1e-2

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    def replace(self, **changes) -> ExperimentConfig:
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def preset(name: str) -> ExperimentConfig:
    """Experiments A to I (1000 replications each)."""
    key = name.strip().upper()
    heavy = dict(covariate_dist="heavy_tailed", error_dist="heavy_tailed")
    gauss = dict(covariate_dist="gaussian", error_dist="gaussian")
    base = dict(n=10, t=10, p=25, s1=5, s2=2)
    table = {
        "A": {**base, **heavy},
        "B": {**base, "n": 100, "s2": 4, **heavy},
        "C": {**base, "t": 100, **heavy},
        "D": {**base, **gauss},
        "E": {**base, "n": 100, "s2": 4, **gauss},
        "F": {**base, "t": 100, **gauss},
        "G": {**base, "p": 250, **heavy},
        "H": {**base, "p": 250, **gauss},
        "I": {**base, "p": 500, "s1": 10, **gauss},
    }
    if key not in table:
        raise InvalidInputError(f"unknown preset {name!r}; choose from A..I")
    cfg = table[key]
    estimators = ESTIMATORS if cfg["p"] + cfg["n"] <= cfg["n"] * cfg["t"] else ESTIMATORS[:3]
    return ExperimentConfig(**cfg, estimators=estimators, name=key)


def _innovations(rng: np.random.Generator, size, dist: str, t_df: float) -> NDArray:
    if dist == "gaussian":
        return rng.standard_normal(size)
    return rng.standard_t(t_df, size) / math.sqrt(t_df / (t_df - 2))


def toeplitz_correlation(p: int, rho: float) -> NDArray:
    return scipy.linalg.toeplitz(rho ** np.arange(p)) if p else np.zeros((0, 0))


def generate_covariates(n: int, t: int, p: int, rho: float, dist: str,
                        rng: np.random.Generator, t_df: float = 3.0) -> NDArray:
    """Rows ``L u`` with ``L L' = Toeplitz(rho^|i-j|)`` and i.i.d. unit-variance ``u``."""
    if p == 0:
        return np.zeros((n * t, 0))
    chol = np.linalg.cholesky(toeplitz_correlation(p, rho))
    u = _innovations(rng, (n * t, p), dist, t_df)
    return u @ chol.T


def support_positions(p: int, s1: int) -> NDArray:
    """Equidistant zero-based positions ``round(k p / s1)``, ``k = 0..s1-1``."""
    return np.array([int(round(k * p / s1)) for k in range(s1)], dtype=np.int64)


def generate_truth(config: ExperimentConfig) -> TrueModel:
    beta = np.zeros(config.p)
    beta[support_positions(config.p, config.s1)] = config.beta_value
    c = np.zeros(config.n)
    c[:config.s2] = config.c_value
    return TrueModel(beta, c)


def replication_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_panel(config: ExperimentConfig, replication_index: int, *,
                   zero_noise: bool = False):
    """Draw ``(data, truth, eps)`` for one replication."""
    rng = replication_rng(config.seed, replication_index)
    truth = generate_truth(config)
    x = generate_covariates(config.n, config.t, config.p, config.rho, config.covariate_dist,
                            rng, config.t_df)
    eps = _innovations(rng, config.n * config.t, config.error_dist, config.t_df)
    if zero_noise:
        eps = np.zeros_like(eps)
    y = x @ truth.beta_star + dummy_apply(truth.c_star, config.t) + eps
    return PanelDataset(config.n, config.t, y, x), truth, eps


def population_gram(config: ExperimentConfig) -> NDArray:
    """``Gamma = blockdiag(E X'X / NT, I_N)`` for the design's DGP."""
    g = np.eye(config.p + config.n)
    g[:config.p, :config.p] = toeplitz_correlation(config.p, config.rho)
    return g


# --- metrics -------------------------------------------------------------------------


@dataclass
class EstimatorMetrics:
    mse_beta: float
    mse_c: float
    sub_beta: float
    sub_c: float
    spar_beta: float
    spar_c: float
    avg_nnz_beta: float
    avg_nnz_c: float
    replications: int

    def row(self) -> list[float]:
        return [self.mse_beta, self.mse_c, self.sub_beta, self.sub_c, self.spar_beta,
                self.spar_c, self.avg_nnz_beta, self.avg_nnz_c]


@dataclass
class MetricsReport:
    """Table-style summary; ``estimators[name]`` is ``None`` when infeasible."""

    estimators: dict[str, EstimatorMetrics | None]
    event_a_rate: float | None = None
    cone_rate: float | None = None
    realized_kappa_quantiles: dict[str, float] | None = None
    bound_satisfaction_rate: float | None = None
    failures: dict[str, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = [",".join(("estimator",) + METRIC_COLUMNS)]
        for name, m in self.estimators.items():
            label = ESTIMATOR_LABELS.get(name, name)
            cells = [""] * len(METRIC_COLUMNS) if m is None else [repr(float(v)) for v in m.row()]
            lines.append(",".join([label] + cells))
        return "\n".join(lines) + "\n"


def _indicators(est: NDArray, truth_support: NDArray) -> tuple[bool, bool]:
    sel = set(np.flatnonzero(est).tolist())
    true = set(np.asarray(truth_support).tolist())
    return true <= sel, true == sel


def compute_metrics(fits: Sequence[PanelFit], truths: Sequence[TrueModel],
                    mse_mode: str = "mean_norm") -> EstimatorMetrics:
    """Average l2 errors, support containment/equality rates and model sizes."""
    if len(fits) == 0 or len(fits) != len(truths):
        raise InvalidInputError("need one truth per fit and at least one replication")
    eb, ec, sb, sc, xb, xc, nb, nc = ([] for _ in range(8))
    for fit, tr in zip(fits, truths):
        eb.append(float(np.linalg.norm(fit.beta_hat - tr.beta_star)))
        ec.append(float(np.linalg.norm(fit.c_hat - tr.c_star)))
        s, x = _indicators(fit.beta_hat, tr.support_beta)
        sb.append(s)
        xb.append(x)
        s, x = _indicators(fit.c_hat, tr.support_c)
        sc.append(s)
        xc.append(x)
        nb.append(np.count_nonzero(fit.beta_hat))
        nc.append(np.count_nonzero(fit.c_hat))
    if mse_mode == "root_mean_square":
        mb, mc = math.sqrt(np.mean(np.square(eb))), math.sqrt(np.mean(np.square(ec)))
    else:
        mb, mc = float(np.mean(eb)), float(np.mean(ec))
    return EstimatorMetrics(mb, mc, float(np.mean(sb)), float(np.mean(sc)), float(np.mean(xb)),
                            float(np.mean(xc)), float(np.mean(nb)), float(np.mean(nc)),
                            len(fits))


# --- replication engine ----------------------------------------------------------------


@dataclass
class ReplicationResult:
    index: int
    truth: TrueModel
    fits: dict[str, PanelFit | None]
    errors: dict[str, str]
    diagnostics: dict | None = None


def _run_diagnostics(config: ExperimentConfig, data: PanelDataset, truth: TrueModel,
                     eps: NDArray) -> dict:
    """Theory checks at the sub-gaussian penalties with ``a = theory_a``.

    The Lasso and the weighted adaptive Lasso are refit at these fixed
    penalties, so the deterministic lemma and sign-recovery checks apply
    literally to the fits being checked.
    """
    inputs = theory.TheoryInputs(n=data.n_individuals, t=data.n_periods, p=data.n_covariates,
                                 a_seq=config.theory_a, s1=truth.s1, s2=truth.s2)
    penalty = theory.penalties_subgaussian(inputs)
    ev = theory.event_a_check(data.x, eps, penalty, data.n_individuals)
    out = {"lambda_theory": penalty.lam, "mu_theory": penalty.mu, "event_a": ev.holds,
           "x_eps_inf": ev.x_eps_inf, "d_eps_inf": ev.d_eps_inf}
    lasso = fit_panel_lasso(data, penalty)
    db = lasso.beta_hat - truth.beta_star
    dc = lasso.c_hat - truth.c_star
    out["cone_ok"] = theory.cone_check(db, dc, truth.support_beta, truth.support_c, penalty)
    basic = theory.basic_inequality_check(lasso, truth, data, penalty)
    out["iq1_ok"], out["iq2_ok"] = basic.iq1_holds, basic.iq2_holds
    out["iq1_margin"], out["iq2_margin"] = basic.iq1_margin, basic.iq2_margin
    out["objective_certificate"] = bool(
        lasso.objective <= theory.lasso_objective_at(data, truth, penalty)
        + 1e-9 * max(1.0, lasso.objective))
    try:
        kap = theory.realized_kappa(lasso, truth, data)
    except theory.ZeroErrorError:
        out.update(kappa_real=None, bound_beta_ok=None, bound_c_ok=None, bound_ok=None)
    else:
        bb, bc = theory.realized_kappa_bounds(penalty, truth.s1, truth.s2, kap,
                                              data.n_individuals, data.n_periods)
        nb_, nc_ = float(np.linalg.norm(db)), float(np.linalg.norm(dc))
        out.update(kappa_real=kap, bound_beta=bb, bound_c=bc, err_beta=nb_, err_c=nc_,
                   bound_beta_ok=bool(nb_ <= bb + theory.SLACK),
                   bound_c_ok=bool(nc_ <= bc + theory.SLACK))
        out["bound_ok"] = out["bound_beta_ok"] and out["bound_c_ok"]
    # Sign recovery of the weighted adaptive Lasso built on this first stage.
    adaptive = fit_adaptive_weighted(data, lasso, penalty)
    k1, k2 = theory.default_k_constants(inputs, truth.s1, truth.s2)
    sign = theory.sign_recovery_conditions(data, truth, lasso, penalty, k1, k2,
                                           gamma=population_gram(config), eps=eps)
    sb = bool(np.array_equal(np.sign(adaptive.beta_hat), np.sign(truth.beta_star)))
    scn = bool(np.array_equal(np.sign(adaptive.c_hat), np.sign(truth.c_star)))
    out.update(sign_premise_beta=sign.premise_beta, sign_premise_c=sign.premise_c,
               sign_beta_ok=sb, sign_c_ok=scn,
               sign_conditions={k: v.holds for k, v in sign.conditions().items()},
               event_c1=sign.event_c1, event_c2=sign.event_c2, event_d=sign.event_d,
               first_stage_beta_ok=sign.first_stage_beta_ok,
               first_stage_c_ok=sign.first_stage_c_ok)
    return out


def run_replication(config: ExperimentConfig, index: int) -> ReplicationResult:
    data, truth, eps = generate_panel(config, index)
    fits: dict[str, PanelFit | None] = {}
    errors: dict[str, str] = {}
    lasso = None
    for name in config.estimators:
        try:
            if name == "lasso":
                lasso = fit_bic(data, config.bic_grid_size, config.grid_ratio,
                                settings=PATH_SETTINGS)
                fits[name] = lasso
            elif name == "adaptive":
                if lasso is None:
                    raise RuntimeError("lasso first stage failed")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fits[name] = fit_adaptive(data, lasso, config.bic_grid_size,
                                              config.grid_ratio, settings=PATH_SETTINGS)
            elif name == "ols_oracle":
                fits[name] = ols_oracle(data, truth)
            elif name == "ols_all":
                fits[name] = ols_all(data)
        except (InfeasibleError, RankDeficientError) as exc:
            fits[name] = None
            errors[name] = f"infeasible: {exc}"
        except Exception as exc:  # one bad replication must not abort the run
            logger.warning("replication %d, %s failed: %s", index, name, exc)
            fits[name] = None
            errors[name] = f"{type(exc).__name__}: {exc}"
    diag = None
    if config.diagnostics:
        try:
            diag = _run_diagnostics(config, data, truth, eps)
        except Exception as exc:
            logger.warning("replication %d diagnostics failed: %s", index, exc)
            errors["diagnostics"] = f"{type(exc).__name__}: {exc}"
    return ReplicationResult(index, truth, fits, errors, diag)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: MetricsReport
    replications: list[ReplicationResult]

    def log_records(self) -> Iterable[dict]:
        for rep in self.replications:
            d = rep.diagnostics or {}
            for name in self.config.estimators:
                fit = rep.fits.get(name)
                rec = {"replication": rep.index, "estimator": name}
                if fit is None:
                    rec["error"] = rep.errors.get(name, "missing")
                else:
                    tr = rep.truth
                    sb, xb = _indicators(fit.beta_hat, tr.support_beta)
                    sc, xc = _indicators(fit.c_hat, tr.support_c)
                    rec.update(
                        mse_beta=float(np.linalg.norm(fit.beta_hat - tr.beta_star)),
                        mse_c=float(np.linalg.norm(fit.c_hat - tr.c_star)),
                        nnz_beta=int(np.count_nonzero(fit.beta_hat)),
                        nnz_c=int(np.count_nonzero(fit.c_hat)),
                        sub_beta=sb, sub_c=sc, spar_beta=xb, spar_c=xc,
                        **({"lambda": fit.penalty.lam} if fit.penalty else {}))
                rec.update(event_a=d.get("event_a"), cone_ok=d.get("cone_ok"),
                           kappa_real=d.get("kappa_real"), bound_ok=d.get("bound_ok"))
                yield rec

    def write_jsonl(self, fh) -> None:
        for rec in self.log_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _aggregate(config: ExperimentConfig, reps: list[ReplicationResult]) -> MetricsReport:
    per: dict[str, EstimatorMetrics | None] = {}
    failures: dict[str, int] = {}
    for name in config.estimators:
        pairs = [(r.fits[name], r.truth) for r in reps if r.fits.get(name) is not None]
        failures[name] = sum(1 for r in reps if r.fits.get(name) is None)
        per[name] = (compute_metrics([f for f, _ in pairs], [t for _, t in pairs],
                                     config.mse_mode) if pairs else None)
    report = MetricsReport(per, failures=failures)
    diags = [r.diagnostics for r in reps if r.diagnostics is not None]
    if diags:
        report.event_a_rate = float(np.mean([d["event_a"] for d in diags]))
        report.cone_rate = float(np.mean([d["cone_ok"] for d in diags]))
        kap = np.array([d["kappa_real"] for d in diags if d["kappa_real"] is not None])
        if kap.size:
            q = np.quantile(kap, [0.05, 0.5, 0.95])
            report.realized_kappa_quantiles = {"q05": float(q[0]), "q50": float(q[1]),
                                               "q95": float(q[2])}
        bounds = [d["bound_ok"] for d in diags if d["bound_ok"] is not None]
        report.bound_satisfaction_rate = float(np.mean(bounds)) if bounds else None
    return report


def run_experiment(config: ExperimentConfig, *, threads: int = 1,
                   progress: bool = False) -> ExperimentResult:
    """Run every replication and aggregate in replication-index order."""
    indices = range(config.replications)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(lambda i: run_replication(config, i), indices))
    else:
        reps = []
        for i in indices:
            reps.append(run_replication(config, i))
            if progress and (i + 1) % 50 == 0:
                logger.info("%s: %d/%d replications", config.name, i + 1, config.replications)
    reps.sort(key=lambda r: r.index)
    return ExperimentResult(config, _aggregate(config, reps), reps)
