"""Finite-sample diagnostics for the panel Lasso.

Penalty levels and error radii from the moment and sub-gaussian regimes,
the deterministic error bounds, checks of the basic inequality and cone
condition on simulated data, restricted-eigenvalue estimates and the
sufficient conditions for sign recovery by the adaptive Lasso.

Anything that depends on unknown constants is computed from user-supplied
values and never asserted.  Bound checks on data use the realized Rayleigh
quotient (:func:`realized_kappa`), which makes them exact algebra.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .panel_lasso import PanelFit, PenaltyPair, lasso_objective
from .panel_model import (
    InvalidInputError,
    PanelDataset,
    ScalingMatrix,
    TrueModel,
    assemble_design,
    dummy_sums,
)

SLACK = 1e-8


class ZeroErrorError(ValueError):
    """The estimate equals the truth, so a ratio of errors is undefined."""


@dataclass(frozen=True)
class TheoryInputs:
    """Dimensions and constants entering the penalty and radius formulas."""

    n: int
    t: int
    p: int
    r: float = 2.0
    a_seq: float = math.e
    max_eps_lr: float = 1.0
    kappa_sq: float = 1.0
    s1: int = 0
    s2: int = 0

    def __post_init__(self):
        if min(self.n, self.t, self.p) < 1:
            raise InvalidInputError("n, t and p must be positive")
        if self.r < 2:
            raise InvalidInputError("moment order r must be at least 2")
        if not (self.a_seq > 0 and self.max_eps_lr > 0):
            raise InvalidInputError("a_seq and max_eps_lr must be positive")


def penalties_moment(inputs: TheoryInputs) -> PenaltyPair:
    """Penalties for errors and covariates with ``r`` moments.

    ``lam = 4 a p^(1/r) sqrt(NT) max_t ||eps_1t||_r`` and
    ``mu = 4 a N^(1/r) sqrt(T) max_t ||eps_1t||_r``.
    """
    i = inputs
    base = 4.0 * i.a_seq * i.max_eps_lr
    return PenaltyPair(base * i.p ** (1 / i.r) * math.sqrt(i.n * i.t),
                       base * i.n ** (1 / i.r) * math.sqrt(i.t))


def penalties_subgaussian(inputs: TheoryInputs) -> PenaltyPair:
    """``lam = sqrt(4 NT ln(p)^3 ln(a)^3)``, ``mu = sqrt(4 T ln(N)^3 ln(a)^3)``.

    Meant for ``a, p, N >= e``; smaller values are evaluated as written and
    ``ln`` of values below one is clipped at zero.
    """
    i = inputs
    la = max(math.log(i.a_seq), 0.0) ** 3
    lam = math.sqrt(4 * i.n * i.t * max(math.log(i.p), 0.0) ** 3 * la)
    mu = math.sqrt(4 * i.t * max(math.log(i.n), 0.0) ** 3 * la)
    return PenaltyPair(lam, mu)


@dataclass(frozen=True)
class XiBound:
    xi: float
    radius_beta: float
    radius_c: float


def xi_bound(inputs: TheoryInputs, regime: str = "subgaussian") -> XiBound:
    """The factor ``xi`` and the radii ``xi/sqrt(NT)`` and ``xi/sqrt(T)``."""
    i = inputs
    if not i.kappa_sq > 0:
        raise InvalidInputError("kappa_sq must be positive")
    if regime == "moment":
        xi = (32 * i.a_seq * i.max_eps_lr
              * (i.p ** (1 / i.r) * math.sqrt(i.s1) + i.n ** (1 / i.r) * math.sqrt(i.s2))
              / i.kappa_sq)
    elif regime == "subgaussian":
        xi = (16 * math.log(i.a_seq) ** 1.5
              * (math.log(i.p) ** 1.5 * math.sqrt(i.s1) + math.log(i.n) ** 1.5 * math.sqrt(i.s2))
              / i.kappa_sq)
    else:
        raise InvalidInputError(f"unknown regime {regime!r}")
    return XiBound(xi, xi / math.sqrt(i.n * i.t), xi / math.sqrt(i.t))


def theorem1_bounds(lam: float, mu: float, s1: float, s2: float, kappa_sq: float,
                    n: int, t: int) -> tuple[float, float]:
    """Deterministic bounds on ``||beta_hat - beta*||`` and ``||c_hat - c*||``."""
    if not kappa_sq > 0:
        raise InvalidInputError("kappa_sq must be positive")
    rn = math.sqrt(n)
    bound_beta = 8 * lam * math.sqrt(s1) / (kappa_sq * n * t) + 4 * mu * math.sqrt(s2) / (kappa_sq * rn * t)
    bound_c = 8 * mu * math.sqrt(s2) / (kappa_sq * t) + 4 * lam * math.sqrt(s1) / (kappa_sq * rn * t)
    return bound_beta, bound_c


def realized_kappa_bounds(penalty: PenaltyPair, s1: int, s2: int, kappa_real: float,
                          n: int, t: int) -> tuple[float, float]:
    """Error bounds implied by the basic inequality when the realized quotient
    ``||Z delta||^2 / ||S delta||^2`` is used in place of ``kappa^2 / 2``."""
    if not kappa_real > 0:
        raise InvalidInputError("realized kappa must be positive")
    lam, mu, rn = penalty.lam, penalty.mu, math.sqrt(n)
    bb = 4 * lam * math.sqrt(s1) / (kappa_real * n * t) + 2 * mu * math.sqrt(s2) / (kappa_real * rn * t)
    bc = 4 * mu * math.sqrt(s2) / (kappa_real * t) + 2 * lam * math.sqrt(s1) / (kappa_real * rn * t)
    return bb, bc


@dataclass(frozen=True)
class EventACheck:
    holds: bool
    x_eps_inf: float
    d_eps_inf: float


def event_a_check(x: NDArray, eps: NDArray, penalty: PenaltyPair, n_individuals: int) -> EventACheck:
    """Whether ``||X'eps||_inf <= lam/2`` and ``||D'eps||_inf <= mu/2``."""
    eps = np.asarray(eps, dtype=float)
    xe = float(np.max(np.abs(np.asarray(x).T @ eps), initial=0.0))
    de = float(np.max(np.abs(dummy_sums(eps, n_individuals)), initial=0.0))
    return EventACheck(bool(xe <= penalty.lam / 2 and de <= penalty.mu / 2), xe, de)


def _split_l1(delta: NDArray, support: ArrayLike) -> tuple[float, float]:
    on = np.zeros(delta.shape[0], dtype=bool)
    on[np.asarray(support, dtype=np.int64)] = True
    return float(np.abs(delta[on]).sum()), float(np.abs(delta[~on]).sum())


def cone_check(delta_beta: ArrayLike, delta_c: ArrayLike, support_beta: ArrayLike,
               support_c: ArrayLike, penalty: PenaltyPair, slack: float = SLACK) -> bool:
    """``lam |d_b off J1| + mu |d_c off J2| <= 3 lam |d_b on J1| + 3 mu |d_c on J2|`` (l1)."""
    b_on, b_off = _split_l1(np.asarray(delta_beta, dtype=float), support_beta)
    c_on, c_off = _split_l1(np.asarray(delta_c, dtype=float), support_c)
    lhs = penalty.lam * b_off + penalty.mu * c_off
    rhs = 3 * penalty.lam * b_on + 3 * penalty.mu * c_on
    return bool(lhs <= rhs + slack)


@dataclass(frozen=True)
class BasicInequalityReport:
    iq1_lhs: float
    iq1_rhs: float
    iq2_lhs: float
    iq2_rhs: float
    slack: float

    @property
    def iq1_margin(self) -> float:
        return self.iq1_rhs - self.iq1_lhs

    @property
    def iq2_margin(self) -> float:
        return self.iq2_rhs - self.iq2_lhs

    @property
    def iq1_holds(self) -> bool:
        return bool(self.iq1_margin >= -self.slack)

    @property
    def iq2_holds(self) -> bool:
        return bool(self.iq2_margin >= -self.slack)


def basic_inequality_check(fit: PanelFit, true_model: TrueModel, data: PanelDataset,
                           penalty: PenaltyPair, slack: float = SLACK) -> BasicInequalityReport:
    """Both sides of the basic inequality and of the cone inequality.

    ``||Z(g_hat - g*)||^2 + lam |b_hat - b*|_1 + mu |c_hat - c*|_1
    <= 4 lam |(b_hat - b*)_J1|_1 + 4 mu |(c_hat - c*)_J2|_1`` and its
    consequence with factor 3 on the right and off-support terms on the left.
    Guaranteed only when the noise event holds.
    """
    db = fit.beta_hat - true_model.beta_star
    dc = fit.c_hat - true_model.c_star
    zd = assemble_design(data).matvec(np.concatenate([db, dc]))
    b_on, b_off = _split_l1(db, true_model.support_beta)
    c_on, c_off = _split_l1(dc, true_model.support_c)
    lam, mu = penalty.lam, penalty.mu
    iq1_lhs = float(zd @ zd) + lam * (b_on + b_off) + mu * (c_on + c_off)
    iq1_rhs = 4 * lam * b_on + 4 * mu * c_on
    return BasicInequalityReport(iq1_lhs, iq1_rhs, lam * b_off + mu * c_off,
                                 3 * lam * b_on + 3 * mu * c_on, slack)


def lasso_objective_at(data: PanelDataset, true_model: TrueModel, penalty: PenaltyPair) -> float:
    return lasso_objective(data, true_model.beta_star, true_model.c_star, penalty)


def realized_kappa(fit: PanelFit, true_model: TrueModel, data: PanelDataset,
                   scaling: ScalingMatrix | None = None) -> float:
    """``||Z (g_hat - g*)||^2 / ||S (g_hat - g*)||^2``."""
    scaling = scaling or ScalingMatrix.for_data(data)
    delta = fit.gamma_hat - true_model.gamma_star
    den = scaling.apply(delta)
    den = float(den @ den)
    if den == 0.0:
        raise ZeroErrorError("estimate equals the truth")
    zd = assemble_design(data).matvec(delta)
    return float(zd @ zd) / den


# --- restricted eigenvalue ---------------------------------------------------------------


def scaled_gram(data: PanelDataset) -> NDArray:
    """``Psi = S^-1 Z'Z S^-1``."""
    s = ScalingMatrix.for_data(data).diagonal()
    return assemble_design(data).gram() / np.outer(s, s)


def cone_weights(penalty: PenaltyPair, n: int, t: int) -> tuple[float, float]:
    """Weights ``lam/sqrt(NT)`` and ``mu/sqrt(T)`` of the scaled cone."""
    return penalty.lam / math.sqrt(n * t), penalty.mu / math.sqrt(t)


@numba.njit(cache=True)
def _retract(delta, omega, on):
    a = 0.0
    b = 0.0
    for j in range(delta.shape[0]):
        if on[j]:
            a += omega[j] * abs(delta[j])
        else:
            b += omega[j] * abs(delta[j])
    if b > 3.0 * a:
        f = 3.0 * a / b if b > 0 else 0.0
        for j in range(delta.shape[0]):
            if not on[j]:
                delta[j] *= f
    nrm = np.sqrt(np.sum(delta * delta))
    if nrm == 0.0:
        return False
    delta /= nrm
    return True


@numba.njit(cache=True)
def _descend(q, omega, on, delta, max_iter, step0):
    # Projected gradient on the sphere intersected with the cone.
    if not _retract(delta, omega, on):
        return np.inf
    val = delta @ q @ delta
    step = step0
    for _ in range(max_iter):
        g = 2.0 * (q @ delta - val * delta)
        gn = np.sum(g * g)
        if gn < 1e-28:
            break
        improved = False
        while step > 1e-14:
            cand = delta - step * g
            if _retract(cand, omega, on):
                cv = cand @ q @ cand
                if cv < val:
                    improved = val - cv > 1e-15
                    delta[:] = cand
                    val = cv
                    step *= 2.0
                    break
            step *= 0.5
        if not improved:
            break
    return val


@dataclass(frozen=True)
class REEstimate:
    """Smallest quotient found; an upper bound on the restricted eigenvalue."""

    value: float
    exact_enumeration: bool
    n_supports: int
    argmin: NDArray
    label: str = "estimate (upper bound)"


def _supports(p: int, k: int, r1: int, r2: int):
    for a in range(r1 + 1):
        for b in range(r2 + 1):
            if a + b == 0:
                continue
            for s1 in itertools.combinations(range(p), a):
                for s2 in itertools.combinations(range(k), b):
                    yield s1, s2


def _n_supports(p: int, k: int, r1: int, r2: int) -> int:
    return sum(math.comb(p, a) * math.comb(k, b)
               for a in range(r1 + 1) for b in range(r2 + 1) if a + b)


def restricted_eigenvalue_estimate(gram: ArrayLike, n_covariates: int, r1: int, r2: int,
                                   weights: tuple[float, float] = (1.0, 1.0), *,
                                   restarts: int = 50, cap: int = 5000,
                                   allow_sampling: bool = False, n_samples: int = 200,
                                   max_iter: int = 2000, seed: int = 0) -> REEstimate:
    """Minimize ``d'Q d / ||d||^2`` over the weighted l1 cones of all supports.

    ``gram`` is ``Psi`` or ``Gamma`` in scaled coordinates, the first
    ``n_covariates`` rows belonging to ``beta`` and the rest to the dummies;
    ``weights`` are the cone weights of the two blocks (see
    :func:`cone_weights`).  Every support with ``|R1| <= r1`` and
    ``|R2| <= r2`` is visited when there are at most ``cap`` of them;
    otherwise ``n_samples`` maximal supports are drawn, which requires
    ``allow_sampling``.  Each support is searched by projected gradient from
    ``restarts`` starting points drawn from a generator seeded by the
    support itself, so a larger budget can never give a larger value.  The
    search may stop in a local minimum: the result is an upper bound.
    """
    q = np.ascontiguousarray(np.asarray(gram, dtype=float))
    d = q.shape[0]
    p = int(n_covariates)
    k = d - p
    if q.shape != (d, d) or not np.allclose(q, q.T, atol=1e-10 * max(1.0, np.abs(q).max())):
        raise InvalidInputError("gram must be a symmetric square matrix")
    if not (0 <= r1 <= p and 0 <= r2 <= k) or r1 + r2 == 0:
        raise InvalidInputError("need 0 <= r1 <= p, 0 <= r2 <= N and r1 + r2 > 0")
    omega = np.concatenate([np.full(p, float(weights[0])), np.full(k, float(weights[1]))])
    if np.any(omega <= 0):
        raise InvalidInputError("cone weights must be positive")
    eigval, eigvec = np.linalg.eigh(q)
    step0 = 0.5 / max(float(eigval[-1]), 1e-12)
    count = _n_supports(p, k, r1, r2)
    exact = count <= cap
    if exact:
        supports = _supports(p, k, r1, r2)
    elif allow_sampling:
        rng = np.random.default_rng(seed)
        supports = [(tuple(sorted(rng.choice(p, r1, replace=False))),
                     tuple(sorted(rng.choice(k, r2, replace=False)))) for _ in range(n_samples)]
        count = n_samples
    else:
        raise InvalidInputError(
            f"{count} supports exceed the enumeration cap {cap}; pass allow_sampling=True")
    best, best_delta = np.inf, np.zeros(d)
    for s1, s2 in supports:
        on = np.zeros(d, dtype=np.bool_)
        on[list(s1)] = True
        on[[p + i for i in s2]] = True
        rng = np.random.default_rng(np.random.SeedSequence([seed, d, len(s1), *s1, *s2]).generate_state(4))
        starts = [eigvec[:, 0].copy()]
        starts += [np.eye(d)[j] for j in np.flatnonzero(on)]
        starts += [rng.standard_normal(d) for _ in range(max(restarts - len(starts), 0))]
        for x0 in starts:
            x0 = np.ascontiguousarray(x0, dtype=float)
            val = _descend(q, omega, on, x0, max_iter, step0)
            if val < best:
                best, best_delta = float(val), x0.copy()
    return REEstimate(best, exact, count, best_delta)


def re_perturbation_bound(kappa_a_sq: float, delta_inf: float, s1: int, s2: int,
                          lam: float, mu: float, n: int) -> float:
    """``kappa_A^2 - 16 delta (s1 + s2) m^2`` with
    ``m = max(lam / (sqrt(N) mu), sqrt(N) mu / lam)``.  May be negative."""
    if lam <= 0 or mu <= 0:
        raise InvalidInputError("lam and mu must be positive")
    if min(kappa_a_sq, delta_inf, s1, s2) < 0:
        raise InvalidInputError("inputs must be nonnegative")
    rn = math.sqrt(n)
    m = max(lam / (rn * mu), rn * mu / lam)
    return kappa_a_sq - 16 * delta_inf * (s1 + s2) * m ** 2


# --- sign recovery of the adaptive Lasso -----------------------------------------------------


@dataclass(frozen=True)
class Condition:
    lhs: float
    rhs: float
    vacuous: bool = False

    @property
    def holds(self) -> bool:
        return bool(self.vacuous or self.lhs <= self.rhs)


@dataclass(frozen=True)
class SignDiagnostics:
    condition_albeta1: Condition
    condition_albeta2: Condition
    condition_alc1: Condition
    condition_alc2: Condition
    k1: float
    k2: float
    phi_min_gamma_jj: float
    phi_min_psi_jj: float
    event_a: bool | None
    event_c1: bool
    event_c2: bool
    event_d: bool
    first_stage_beta_ok: bool
    first_stage_c_ok: bool

    def conditions(self) -> dict[str, Condition]:
        return {"albeta1": self.condition_albeta1, "albeta2": self.condition_albeta2,
                "alc1": self.condition_alc1, "alc2": self.condition_alc2}

    @property
    def _common(self) -> bool:
        return bool(self.event_a and self.event_d and self.first_stage_beta_ok
                    and self.first_stage_c_ok)

    @property
    def premise_beta(self) -> bool:
        """Every hypothesis for ``sign(beta_tilde) = sign(beta*)`` holds."""
        return bool(self._common and self.event_c1 and self.condition_albeta1.holds
                    and self.condition_albeta2.holds)

    @property
    def premise_c(self) -> bool:
        return bool(self._common and self.event_c2 and self.condition_alc1.holds
                    and self.condition_alc2.holds)


def default_k_constants(inputs: TheoryInputs, s1: int, s2: int, regime: str = "subgaussian",
                        a_const: float = 1.0) -> tuple[float, float]:
    """Thresholds for the cross-correlation events.

    Sub-gaussian: ``K1 = A ln(1+|J1c|) ln(e+|J1|) sqrt(NT) ln a`` and
    ``K2 = A ln(1+|J1|) ln(1+|J2c|) sqrt(T) ln a``.  Moment:
    ``K1 = |J1c|^(2/r) |J1|^(2/r) sqrt(NT) a`` and
    ``K2 = |J1|^(1/r) |J2c|^(1/r) sqrt(T) a``.
    """
    i = inputs
    j1c, j2c = i.p - s1, i.n - s2
    if regime == "subgaussian":
        la = math.log(i.a_seq)
        k1 = a_const * math.log(1 + j1c) * math.log(math.e + s1) * math.sqrt(i.n * i.t) * la
        k2 = a_const * math.log(1 + s1) * math.log(1 + j2c) * math.sqrt(i.t) * la
    elif regime == "moment":
        k1 = j1c ** (2 / i.r) * s1 ** (2 / i.r) * math.sqrt(i.n * i.t) * i.a_seq
        k2 = s1 ** (1 / i.r) * j2c ** (1 / i.r) * math.sqrt(i.t) * i.a_seq
    else:
        raise InvalidInputError(f"unknown regime {regime!r}")
    return k1, k2


def _phi_min(m: NDArray) -> float:
    return float(np.linalg.eigvalsh(m)[0]) if m.size else np.inf


def sign_recovery_conditions(data: PanelDataset, true_model: TrueModel, first_stage: PanelFit,
                             penalty: PenaltyPair, k1: float, k2: float, *,
                             gamma: ArrayLike | None = None,
                             eps: ArrayLike | None = None) -> SignDiagnostics:
    """Evaluate the four sufficient inequalities and the events they rely on.

    ``gamma`` is the population matrix ``blockdiag(E X'X / NT, I_N)``; when
    omitted, its relevant block is replaced by ``Psi_JJ``.  The event on
    the noise is evaluated only when ``eps`` is given.  Conditions that
    concern an empty support are reported as holding vacuously.
    """
    n, t, p = data.n_individuals, data.n_periods, data.n_covariates
    j1, j2 = true_model.support_beta, true_model.support_c
    jj = np.concatenate([j1, p + j2])
    psi = scaled_gram(data)
    psi_jj = psi[np.ix_(jj, jj)]
    gamma_jj = psi_jj if gamma is None else np.asarray(gamma, dtype=float)[np.ix_(jj, jj)]
    phi_g, phi_p = _phi_min(gamma_jj), _phi_min(psi_jj)
    if jj.size and not phi_g > 0:
        raise InvalidInputError("Gamma_JJ is singular")

    lam, mu = penalty.lam, penalty.mu
    rnt, rt = math.sqrt(n * t), math.sqrt(t)
    bmin, cmin = true_model.beta_min, true_model.c_min
    bracket = (max(lam / (2 * rnt), mu / (2 * rt))
               + max(2 * lam / (rnt * bmin), 2 * mu / (rt * cmin)))
    size_j = jj.size
    err_b = float(np.linalg.norm(first_stage.beta_hat - true_model.beta_star))
    err_c = float(np.linalg.norm(first_stage.c_hat - true_model.c_star))
    empty = size_j == 0
    lead = 2 * math.sqrt(size_j) / phi_g * bracket if not empty else 0.0
    with np.errstate(divide="ignore"):
        rhs_b2 = lam / err_b if err_b > 0 else np.inf
        rhs_c2 = mu / err_c if err_c > 0 else np.inf
    albeta1 = Condition(lead, rnt * bmin, vacuous=true_model.s1 == 0)
    albeta2 = Condition(2 * size_j * k1 / phi_g * bracket + lam / 2 if not empty else lam / 2,
                        rhs_b2, vacuous=true_model.s1 == 0)
    alc1 = Condition(lead, rt * cmin, vacuous=true_model.s2 == 0)
    alc2 = Condition(2 * size_j * k2 / phi_g * bracket + mu / 2 if not empty else mu / 2,
                     rhs_c2, vacuous=true_model.s2 == 0)

    x = data.x
    j1c = np.setdiff1d(np.arange(p), j1)
    j2c = np.setdiff1d(np.arange(n), j2)
    sums = dummy_sums(x, n)  # N x p, per-individual column sums
    c1_a = np.abs(x[:, j1c].T @ x[:, j1]).max(initial=0.0) / rnt
    c1_b = np.abs(sums[np.ix_(j2, j1c)]).max(initial=0.0) / rt
    c2 = np.abs(sums[np.ix_(j2c, j1)]).max(initial=0.0) / rt
    event_a = None
    if eps is not None:
        event_a = event_a_check(x, eps, penalty, n).holds
    return SignDiagnostics(
        albeta1, albeta2, alc1, alc2, k1, k2, phi_g, phi_p, event_a,
        event_c1=bool(max(c1_a, c1_b) <= k1), event_c2=bool(c2 <= k2),
        event_d=bool(empty or phi_p >= phi_g / 2),
        first_stage_beta_ok=bool(err_b <= bmin / 2),
        first_stage_c_ok=bool(err_c <= cmin / 2))
