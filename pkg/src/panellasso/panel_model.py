"""Balanced fixed-effects panel: data containers, design view and scaling.

Rows are stored individual-major: observation ``(i, t)`` lives at row
``i * T + t`` (zero-based).  Every routine in the package relies on this.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray


class InvalidInputError(ValueError):
    """Raised when data or arguments violate a documented precondition."""


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Observed panel ``y = X beta + D c + eps``.

    Parameters
    ----------
    n_individuals, n_periods : int
        ``N`` and ``T``.
    y : array of shape (N*T,)
    x : array of shape (N*T, p)
        ``p`` may be zero.
    """

    n_individuals: int
    n_periods: int
    y: NDArray
    x: NDArray

    def __post_init__(self):
        n, t = int(self.n_individuals), int(self.n_periods)
        if n < 1 or t < 1:
            raise InvalidInputError(f"need N >= 1 and T >= 1, got N={n}, T={t}")
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise InvalidInputError("x must be two-dimensional")
        if y.shape[0] != n * t:
            raise InvalidInputError(f"y has {y.shape[0]} rows, expected N*T={n * t}")
        if x.shape[0] != n * t:
            raise InvalidInputError(f"x has {x.shape[0]} rows, expected N*T={n * t}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise InvalidInputError("y and x must be finite")
        object.__setattr__(self, "n_individuals", n)
        object.__setattr__(self, "n_periods", t)
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def n_obs(self) -> int:
        return self.n_individuals * self.n_periods

    def with_response(self, y: ArrayLike) -> PanelDataset:
        return PanelDataset(self.n_individuals, self.n_periods, y, self.x)


def dummy_apply(c: NDArray, n_periods: int) -> NDArray:
    """``D c`` without forming ``D``."""
    return np.repeat(np.asarray(c, dtype=float), n_periods)


def dummy_sums(v: NDArray, n_individuals: int) -> NDArray:
    """``D' v`` for a vector or a matrix with ``N*T`` rows."""
    v = np.asarray(v, dtype=float)
    return v.reshape(n_individuals, -1, *v.shape[1:]).sum(axis=1)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Logical view of ``Z = (X, D)`` with optionally rescaled dummy columns.

    The dummy block is never stored densely.  ``dummy_index[k]`` names the
    individual whose indicator forms dummy column ``k`` and
    ``dummy_scale[k]`` multiplies it.  The full design uses every individual
    with unit scale; reduced designs (adaptive second stage) keep a subset.
    """

    x: NDArray
    n_individuals: int
    n_periods: int
    dummy_index: NDArray = None
    dummy_scale: NDArray = None

    def __post_init__(self):
        if self.dummy_index is None:
            object.__setattr__(self, "dummy_index", np.arange(self.n_individuals))
        idx = np.asarray(self.dummy_index, dtype=np.int64)
        scale = (np.ones(idx.shape[0]) if self.dummy_scale is None
                 else np.broadcast_to(np.asarray(self.dummy_scale, dtype=float), idx.shape))
        object.__setattr__(self, "dummy_index", idx)
        object.__setattr__(self, "dummy_scale", _frozen(scale))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_individuals * self.n_periods, self.n_columns)

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def n_columns(self) -> int:
        return self.x.shape[1] + self.dummy_index.shape[0]

    @property
    def covariate_block(self) -> slice:
        return slice(0, self.n_covariates)

    @property
    def dummy_block(self) -> slice:
        return slice(self.n_covariates, self.n_columns)

    def _dummy_full(self, coef: NDArray) -> NDArray:
        full = np.zeros(self.n_individuals)
        np.add.at(full, self.dummy_index, coef * self.dummy_scale)
        return full

    def matvec(self, gamma: NDArray) -> NDArray:
        p = self.n_covariates
        gamma = np.asarray(gamma, dtype=float)
        return self.x @ gamma[:p] + dummy_apply(self._dummy_full(gamma[p:]), self.n_periods)

    def rmatvec(self, r: NDArray) -> NDArray:
        r = np.asarray(r, dtype=float)
        sums = dummy_sums(r, self.n_individuals)[self.dummy_index] * self.dummy_scale
        return np.concatenate([self.x.T @ r, sums])

    def gram(self) -> NDArray:
        """``Z'Z`` assembled blockwise in ``O(NT p^2 + N p)``."""
        p, k = self.n_covariates, self.dummy_index.shape[0]
        g = np.empty((p + k, p + k))
        g[:p, :p] = self.x.T @ self.x
        dx = dummy_sums(self.x, self.n_individuals)[self.dummy_index] * self.dummy_scale[:, None]
        g[p:, :p] = dx
        g[:p, p:] = dx.T
        dd = np.zeros((k, k))
        same = self.dummy_index[:, None] == self.dummy_index[None, :]
        dd[same] = self.n_periods * np.outer(self.dummy_scale, self.dummy_scale)[same]
        g[p:, p:] = dd
        return g

    def column(self, j: int) -> NDArray:
        p = self.n_covariates
        if j < p:
            return np.array(self.x[:, j])
        col = np.zeros(self.shape[0])
        i = self.dummy_index[j - p]
        col[i * self.n_periods:(i + 1) * self.n_periods] = self.dummy_scale[j - p]
        return col

    def toarray(self) -> NDArray:
        """Dense copy; for tests and small problems only."""
        d = np.zeros((self.shape[0], self.dummy_index.shape[0]))
        for k, i in enumerate(self.dummy_index):
            d[i * self.n_periods:(i + 1) * self.n_periods, k] = self.dummy_scale[k]
        return np.hstack([self.x, d])


def assemble_design(data: PanelDataset) -> DesignMatrix:
    """``Z = (X, I_N kron iota_T)`` as a logical view."""
    return DesignMatrix(data.x, data.n_individuals, data.n_periods)


def rescale_dummies(design: DesignMatrix, n: int) -> DesignMatrix:
    """Multiply the dummy block by ``sqrt(n)``; covariates untouched."""
    return DesignMatrix(design.x, design.n_individuals, design.n_periods,
                        design.dummy_index, design.dummy_scale * np.sqrt(n))


@dataclass(frozen=True)
class ScalingMatrix:
    """Diagonal ``S = diag(sqrt(NT) I_p, sqrt(T) I_N)``."""

    n_covariates: int
    n_individuals: int
    n_periods: int

    @property
    def covariate_scale(self) -> float:
        return float(np.sqrt(self.n_individuals * self.n_periods))

    @property
    def dummy_scale(self) -> float:
        return float(np.sqrt(self.n_periods))

    def diagonal(self) -> NDArray:
        return np.concatenate([np.full(self.n_covariates, self.covariate_scale),
                               np.full(self.n_individuals, self.dummy_scale)])

    def matrix(self) -> NDArray:
        return np.diag(self.diagonal())

    def apply(self, v: NDArray) -> NDArray:
        return self.diagonal() * np.asarray(v, dtype=float)

    def solve(self, v: NDArray) -> NDArray:
        return np.asarray(v, dtype=float) / self.diagonal()

    @classmethod
    def for_data(cls, data: PanelDataset) -> ScalingMatrix:
        return cls(data.n_covariates, data.n_individuals, data.n_periods)


@dataclass(frozen=True)
class TrueModel:
    """Population coefficients of a simulated panel."""

    beta_star: NDArray
    c_star: NDArray

    def __post_init__(self):
        object.__setattr__(self, "beta_star", _frozen(np.ravel(self.beta_star)))
        object.__setattr__(self, "c_star", _frozen(np.ravel(self.c_star)))

    @cached_property
    def support_beta(self) -> NDArray:
        return np.flatnonzero(self.beta_star)

    @cached_property
    def support_c(self) -> NDArray:
        return np.flatnonzero(self.c_star)

    @property
    def s1(self) -> int:
        return int(self.support_beta.size)

    @property
    def s2(self) -> int:
        return int(self.support_c.size)

    @property
    def beta_min(self) -> float:
        return float(np.min(np.abs(self.beta_star[self.support_beta]))) if self.s1 else np.inf

    @property
    def c_min(self) -> float:
        return float(np.min(np.abs(self.c_star[self.support_c]))) if self.s2 else np.inf

    @property
    def gamma_star(self) -> NDArray:
        return np.concatenate([self.beta_star, self.c_star])


STANDARDIZE_TARGETS = ("sqrt_nt", "nt")


def standardize_covariates(data: PanelDataset, target: str = "sqrt_nt") -> tuple[PanelDataset, NDArray]:
    """Rescale each covariate column to l2-norm ``sqrt(NT)`` (or ``NT``).

    Returns the rescaled dataset and the divisors ``s`` with
    ``x_std = x / s``; coefficients map back as ``beta = beta_std / s``.
    All-zero columns are left alone (divisor 1).  Columns are not centered:
    the fixed effects already absorb individual means.
    """
    if target not in STANDARDIZE_TARGETS:
        raise InvalidInputError(f"unknown standardization target {target!r}")
    goal = np.sqrt(data.n_obs) if target == "sqrt_nt" else float(data.n_obs)
    norms = np.linalg.norm(data.x, axis=0)
    scale = np.where(norms > 0, norms / goal, 1.0)
    return PanelDataset(data.n_individuals, data.n_periods, data.y, data.x / scale), scale


def residual_sum_of_squares(data: PanelDataset, beta: ArrayLike, c: ArrayLike) -> float:
    """``||y - X beta - D c||^2``."""
    beta = np.asarray(beta, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if beta.shape[0] != data.n_covariates or c.shape[0] != data.n_individuals:
        raise InvalidInputError(
            f"expected beta of length {data.n_covariates} and c of length "
            f"{data.n_individuals}, got {beta.shape[0]} and {c.shape[0]}")
    r = data.y - data.x @ beta - dummy_apply(c, data.n_periods)
    return float(r @ r)
