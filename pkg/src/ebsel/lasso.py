"""LASSO by cyclic coordinate descent, with repeated K-fold cross-validation.

The objective at penalty ``lam`` on standardized columns and centered
response is ``(1 / 2N) ||y - Z b||^2 + lam ||b||_1``. Coefficients are
reported on the original column scale together with an intercept.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .rng import child_seeds, make_rng


@dataclass
class LassoConfig:
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3
    folds: int = 10
    repeats: int = 30
    seed: int = 0
    tol: float = 1e-7
    max_sweeps: int = 10_000
    n_threads: int = 1

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be positive")
        if not 0 < self.lambda_min_ratio < 1:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")
        if self.repeats < 1:
            raise ValueError("repeats must be positive")


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _soft(x, lam):
    if x > lam:
        return x - lam
    if x < -lam:
        return x + lam
    return 0.0


@numba.njit(cache=True, nogil=True)
def _objective(r, b, lam, n):
    return 0.5 * np.dot(r, r) / n + lam * np.sum(np.abs(b))


@numba.njit(cache=True, nogil=True)
def _sweep(Z, norms, r, b, lam, n, idx):
    """One pass of exact coordinate minimization over ``idx``; returns the
    largest ``norms[j] * change**2``. ``r`` is kept equal to y - Z b."""
    dmax = 0.0
    for j in idx:
        if norms[j] == 0.0:
            continue
        zj = Z[:, j]
        old = b[j]
        rho = np.dot(zj, r) / n + norms[j] * old
        new = _soft(rho, lam) / norms[j]
        if new != old:
            d = new - old
            for i in range(r.shape[0]):
                r[i] -= d * zj[i]
            b[j] = new
            ad = norms[j] * d * d
            if ad > dmax:
                dmax = ad
    return dmax


@numba.njit(cache=True, nogil=True)
def _cd_solve(Z, y, lam, b, tol, max_sweeps, record, trace):
    """Minimize at one penalty starting from ``b`` (updated in place).

    Alternates full sweeps with sweeps restricted to the nonzero set until a
    full sweep moves no coefficient by more than ``tol`` relative to the null
    deviance: ``max_j norms_j * db_j**2 <= tol * y'y / n``. Returns
    ``(n_sweeps, converged, n_trace)``; when ``record`` is set the objective
    after every sweep is written to ``trace``.
    """
    n, K = Z.shape
    norms = np.empty(K)
    for j in range(K):
        norms[j] = np.dot(Z[:, j], Z[:, j]) / n
    r = y - Z @ b
    thresh = tol * np.dot(y, y) / n
    everything = np.arange(K)
    sweeps = 0
    nt = 0
    while sweeps < max_sweeps:
        dmax = _sweep(Z, norms, r, b, lam, n, everything)
        sweeps += 1
        if record and nt < trace.shape[0]:
            trace[nt] = _objective(r, b, lam, n)
            nt += 1
        if dmax <= thresh:
            return sweeps, True, nt
        active = np.flatnonzero(b)
        while sweeps < max_sweeps:
            dmax = _sweep(Z, norms, r, b, lam, n, active)
            sweeps += 1
            if record and nt < trace.shape[0]:
                trace[nt] = _objective(r, b, lam, n)
                nt += 1
            if dmax <= thresh:
                break
    return sweeps, False, nt


@numba.njit(cache=True, nogil=True)
def _max_abs_score(Z, y):
    # same arithmetic as the first sweep from zero, so lambda_max is exact
    n = Z.shape[0]
    best = 0.0
    for j in range(Z.shape[1]):
        v = abs(np.dot(Z[:, j], y) / n)
        if v > best:
            best = v
    return best


@numba.njit(cache=True, nogil=True)
def _cd_path(Z, y, lambdas, tol, max_sweeps):
    K = Z.shape[1]
    L = lambdas.shape[0]
    B = np.zeros((L, K))
    sweeps = np.zeros(L, dtype=np.int64)
    conv = np.zeros(L, dtype=np.bool_)
    b = np.zeros(K)
    dummy = np.empty(0)
    for i in range(L):
        s, c, _ = _cd_solve(Z, y, lambdas[i], b, tol, max_sweeps, False, dummy)
        B[i] = b
        sweeps[i] = s
        conv[i] = c
    return B, sweeps, conv


# ---------------------------------------------------------------------------
# public API


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray  # 1 for constant columns, which are then held at zero
    y_mean: float
    usable: np.ndarray

    def apply(self, Z):
        return (np.asarray(Z, dtype=np.float64) - self.x_mean) / self.x_scale


def standardize(y, Z) -> tuple[np.ndarray, np.ndarray, Standardization]:
    """Center ``y``; center and scale the columns of ``Z`` to unit variance."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    Z = np.asarray(Z, dtype=np.float64)
    mean = Z.mean(axis=0)
    sd = Z.std(axis=0)
    usable = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(usable, sd, 1.0)
    Zs = np.where(usable, (Z - mean) / scale, 0.0)
    ym = float(y.mean())
    return y - ym, np.asfortranarray(Zs), Standardization(mean, scale, ym, usable)


def lambda_max(y, Z) -> float:
    """Smallest penalty at which every coefficient is zero."""
    yc, Zs, _ = standardize(y, Z)
    return float(_max_abs_score(Zs, yc))


def lambda_grid(y, Z, config: LassoConfig) -> np.ndarray:
    lmax = lambda_max(y, Z)
    if lmax == 0:
        return np.zeros(config.n_lambda)
    return np.geomspace(lmax, config.lambda_min_ratio * lmax, config.n_lambda)


@dataclass
class LassoPath:
    lambdas: np.ndarray
    coef: np.ndarray  # n_lambda x K, original column scale
    intercept: np.ndarray
    coef_std: np.ndarray  # on the standardized scale
    n_sweeps: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def predict(self, Z, index: int) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.coef[index] + self.intercept[index]

    def support(self, index: int) -> np.ndarray:
        return np.flatnonzero(self.coef_std[index])


def lasso_path(y, Z, config: LassoConfig | None = None, lambdas=None) -> LassoPath:
    """Coefficients along a decreasing penalty grid, warm-started.

    Non-convergence at a penalty is flagged in ``converged``; the last
    iterate is kept.
    """
    config = config or LassoConfig()
    yc, Zs, st = standardize(y, Z)
    lam = lambda_grid(y, Z, config) if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lam) > 0):
        raise ValueError("penalty grid must be non-increasing")
    B, sweeps, conv = _cd_path(Zs, yc, lam, config.tol, config.max_sweeps)
    coef = B / st.x_scale
    intercept = st.y_mean - coef @ st.x_mean
    return LassoPath(lam, coef, intercept, B, sweeps, conv)


def objective_trace(y, Z, lam: float, config: LassoConfig | None = None,
                    start=None, max_records: int = 100_000) -> tuple[np.ndarray, bool]:
    """Objective value after each sweep of a single-penalty solve."""
    config = config or LassoConfig()
    yc, Zs, _ = standardize(y, Z)
    b = np.zeros(Zs.shape[1]) if start is None else np.array(start, dtype=np.float64)
    trace = np.empty(max_records)
    _, conv, nt = _cd_solve(Zs, yc, float(lam), b, config.tol, config.max_sweeps, True, trace)
    return trace[:nt], bool(conv)


def fold_assignments(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def cv_curve(y, Z, lambdas, folds: list[np.ndarray], config: LassoConfig) -> np.ndarray:
    """Pooled held-out mean squared error at each penalty for one fold split."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    Z = np.asarray(Z, dtype=np.float64)
    sse = np.zeros(len(lambdas))
    for test in folds:
        train = np.setdiff1d(np.arange(len(y)), test)
        path = lasso_path(y[train], Z[train], config, lambdas=lambdas)
        pred = Z[test] @ path.coef.T + path.intercept
        sse += np.sum((y[test, None] - pred) ** 2, axis=0)
    return sse / len(y)


@dataclass
class LassoCVResult:
    lambda_star: float
    index: int
    selected: np.ndarray
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_curves: np.ndarray  # repeats x n_lambda
    repeat_index: np.ndarray  # per-repeat argmin
    repeat_r2: np.ndarray  # in-sample R^2 of the full-data fit at each repeat's argmin
    path: LassoPath

    @property
    def median_r2(self) -> float:
        return float(np.median(self.repeat_r2))

    def to_dict(self, names=None) -> dict:
        names = names or [f"z{k + 1}" for k in range(self.path.coef.shape[1])]
        return {
            "lambda_star": self.lambda_star,
            "selected": [{"index": int(k), "name": names[k], "coef": float(self.path.coef[self.index, k])}
                         for k in self.selected],
            "lambdas": self.lambdas.tolist(),
            "cv_mean": self.cv_mean.tolist(),
            "median_r2": self.median_r2,
            "converged": self.path.all_converged,
        }


def _first_argmin(v: np.ndarray) -> int:
    # ties resolve to the larger penalty
    return int(np.flatnonzero(v == v.min())[0])


def lasso_cv_select(y, Z, config: LassoConfig | None = None) -> LassoCVResult:
    """Repeated K-fold CV; the penalty minimizing the repeat-averaged curve wins."""
    config = config or LassoConfig()
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    Z = np.asarray(Z, dtype=np.float64)
    n = len(y)
    if n < config.folds:
        raise ValueError(f"need at least {config.folds} observations for {config.folds}-fold CV")
    lambdas = lambda_grid(y, Z, config)
    seeds = child_seeds(config.seed, config.repeats)

    def one(seed):
        return cv_curve(y, Z, lambdas, fold_assignments(n, config.folds, make_rng(seed)), config)

    if config.n_threads > 1 and config.repeats > 1:
        with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
            curves = np.array(list(pool.map(one, seeds)))
    else:
        curves = np.array([one(s) for s in seeds])
    mean = curves.mean(axis=0)
    idx = _first_argmin(mean)
    path = lasso_path(y, Z, config, lambdas=lambdas)

    tss = float(np.sum((y - y.mean()) ** 2))
    rep_idx = np.array([_first_argmin(c) for c in curves])
    r2 = np.empty(len(rep_idx))
    for i, j in enumerate(rep_idx):
        res = y - path.predict(Z, j)
        r2[i] = 1.0 - float(res @ res) / tss if tss > 0 else 0.0
    return LassoCVResult(float(lambdas[idx]), idx, path.support(idx), lambdas, mean, curves,
                         rep_idx, r2, path)
