"""Model state and the low-rank likelihood machinery.

The marginal covariance of the response is

    Sigma = sigma2_e * I_N + sigma2 * V V',   V = Z_L Gamma_L,

where Z_L holds the L active putative columns. Every computation here goes
through the L x L matrix ``M = I_L + (sigma2 / sigma2_e) V'V`` so nothing of
size N x N is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .columns import ColumnSource, as_column_source

SIGMA_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class ComputationError(RuntimeError):
    """Numerical failure that invalidates the current iteration."""


@dataclass
class Dataset:
    """Response ``y``, locked-in design ``X`` and putative column source ``Z``."""

    y: np.ndarray
    X: np.ndarray
    Z: ColumnSource
    y_name: str = "y"
    x_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        self.Z = as_column_source(self.Z)
        n = self.y.shape[0]
        if n < 2:
            raise ValueError("need at least two observations")
        if self.X.shape[0] != n or self.Z.n_rows != n:
            raise ValueError("y, X and Z must have the same number of rows")
        if self.Z.n_columns < 1:
            raise ValueError("need at least one putative column")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise ValueError("y and X must be finite")
        if not self.x_names:
            self.x_names = [f"x{j + 1}" for j in range(self.X.shape[1])]

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def J(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Z.n_columns

    @property
    def z_names(self) -> list[str]:
        return self.Z.names


def clamp_probabilities(p, K: int) -> np.ndarray:
    """Floor each mixture weight at 1/(10K) and renormalize.

    Floored components stay exactly at the floor; the remaining mass is
    rescaled so the vector still sums to one.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, None)
    if p.sum() <= 0:
        raise ValueError("mixture weights must not all be zero")
    p = p / p.sum()
    eps = 1.0 / (10.0 * K)
    low = p < eps
    for _ in range(3):
        free = ~low
        scale = (1.0 - eps * low.sum()) / p[free].sum()
        q = np.where(low, eps, p * scale)
        new_low = q < eps
        if not np.any(new_low & ~low):
            return q
        low |= new_low
    return q


@dataclass
class ModelParams:
    beta: np.ndarray
    mu: float
    sigma2: float
    sigma2_e: float
    p: np.ndarray  # (p0, p1, p2) for gamma = 0, +1, -1

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.mu = float(self.mu)
        self.sigma2 = max(float(self.sigma2), 0.0)
        self.sigma2_e = max(float(self.sigma2_e), SIGMA_FLOOR)

    def copy(self) -> "ModelParams":
        return ModelParams(self.beta.copy(), self.mu, self.sigma2, self.sigma2_e, self.p.copy())

    def prior_by_sign(self) -> np.ndarray:
        """Prior weights ordered as gamma = (-1, 0, +1)."""
        return np.array([self.p[2], self.p[0], self.p[1]])

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "mu": self.mu,
            "sigma2": self.sigma2,
            "sigma2_e": self.sigma2_e,
            "p": self.p.tolist(),
        }


def gamma_class(gamma) -> np.ndarray:
    """Mixture class index of each gamma: 0 for null, 1 positive, 2 negative."""
    g = np.asarray(gamma)
    return np.where(g > 0, 1, np.where(g < 0, 2, 0))


def class_counts(gamma) -> np.ndarray:
    return np.bincount(gamma_class(gamma).ravel(), minlength=3).astype(np.float64)


class LatentState:
    """Per-column indicators plus cached inner products of the active columns.

    The cache is rebuilt from the raw columns whenever the active set
    changes, never updated incrementally.
    """

    def __init__(self, data: Dataset, gamma=None, _cache=None):
        self.data = data
        if gamma is None:
            gamma = np.zeros(data.K)
        self.gamma = np.asarray(gamma, dtype=np.float64).copy()
        if self.gamma.shape != (data.K,):
            raise ValueError("gamma must have one entry per putative column")
        if np.any(np.abs(self.gamma) > 1.0):
            raise ValueError("gamma values must lie in [-1, 1]")
        self._columns: dict[int, np.ndarray] = dict(_cache or {})
        self._key: tuple[int, ...] | None = None

    def copy(self) -> "LatentState":
        return LatentState(self.data, self.gamma, self._columns)

    def with_value(self, k: int, value: float) -> "LatentState":
        new = self.copy()
        new.gamma[k] = value
        return new

    def set(self, k: int, value: float) -> None:
        self.gamma[k] = value

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    @property
    def L(self) -> int:
        return int(np.count_nonzero(self.gamma))

    def _refresh(self) -> None:
        key = tuple(self.active.tolist())
        if key == self._key:
            return
        for k in key:
            if k not in self._columns:
                self._columns[k] = self.data.Z.fetch(k)
        self._Z_L = (np.column_stack([self._columns[k] for k in key])
                     if key else np.empty((self.data.N, 0)))
        self._gram = self._Z_L.T @ self._Z_L
        self._cross_y = self._Z_L.T @ self.data.y
        self._cross_X = self._Z_L.T @ self.data.X
        self._key = key

    @property
    def Z_L(self) -> np.ndarray:
        self._refresh()
        return self._Z_L

    @property
    def gram(self) -> np.ndarray:
        self._refresh()
        return self._gram

    @property
    def cross_y(self) -> np.ndarray:
        self._refresh()
        return self._cross_y

    @property
    def cross_X(self) -> np.ndarray:
        self._refresh()
        return self._cross_X

    def V(self) -> np.ndarray:
        """Z_L Gamma_L."""
        return self.Z_L * self.gamma[self.active]

    def counts(self) -> np.ndarray:
        return class_counts(self.gamma)


@dataclass(frozen=True)
class CovarianceHandle:
    """Factorized view of Sigma through the L x L matrix M."""

    sigma2: float
    sigma2_e: float
    V: np.ndarray
    VtV: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of M

    @property
    def N(self) -> int:
        return self.V.shape[0]

    @property
    def L(self) -> int:
        return self.V.shape[1]

    @property
    def M(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def solve_M(self, B: np.ndarray) -> np.ndarray:
        if self.L == 0:
            return np.asarray(B, dtype=np.float64)
        return linalg.cho_solve((self.chol, True), B)

    def solve(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        out = r / self.sigma2_e
        if self.L == 0 or self.sigma2 == 0.0:
            return out
        coef = self.sigma2 / self.sigma2_e ** 2
        return out - coef * (self.V @ self.solve_M(self.V.T @ r))

    def log_det(self) -> float:
        ld = self.N * np.log(self.sigma2_e)
        if self.L:
            ld += 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return float(ld)

    def trace_inverse(self) -> float:
        """trace(Sigma^-1) without forming Sigma."""
        tr = self.N / self.sigma2_e
        if self.L == 0 or self.sigma2 == 0.0:
            return tr
        return tr - self.sigma2 / self.sigma2_e ** 2 * float(np.trace(self.solve_M(self.VtV)))


def build_covariance(state: LatentState, params: ModelParams, data: Dataset | None = None) -> CovarianceHandle:
    if params.sigma2_e <= 0:
        raise ValueError("sigma2_e must be positive")
    act = state.active
    g = state.gamma[act]
    V = state.Z_L * g
    VtV = state.gram * np.outer(g, g)
    L = len(act)
    M = np.eye(L) + (params.sigma2 / params.sigma2_e) * VtV
    if L:
        try:
            chol = linalg.cholesky(M, lower=True)
        except linalg.LinAlgError as exc:
            raise ComputationError(f"M is not positive definite for active set {act.tolist()}") from exc
    else:
        chol = np.empty((0, 0))
    V.setflags(write=False)
    return CovarianceHandle(params.sigma2, params.sigma2_e, V, VtV, chol)


def solve_sigma(handle: CovarianceHandle, r: np.ndarray) -> np.ndarray:
    return handle.solve(r)


def log_det_sigma(handle: CovarianceHandle) -> float:
    return handle.log_det()


def residual(data: Dataset, state: LatentState, params: ModelParams) -> np.ndarray:
    """y - X beta - V 1 mu."""
    r = data.y - data.X @ params.beta
    if state.L:
        r = r - params.mu * state.V().sum(axis=1)
    return r


def log_prior(counts: np.ndarray, p: np.ndarray) -> float:
    return float(np.dot(counts, np.log(p)))


def log_likelihood(data: Dataset, state: LatentState, params: ModelParams,
                   handle: CovarianceHandle | None = None) -> float:
    """Complete-data log-likelihood: prior counts plus Gaussian log-density."""
    if handle is None:
        handle = build_covariance(state, params, data)
    r = residual(data, state, params)
    quad = float(r @ handle.solve(r))
    return (log_prior(state.counts(), params.p)
            - 0.5 * data.N * LOG_2PI - 0.5 * handle.log_det() - 0.5 * quad)
