"""Ordinary least-squares refit of a selected model and its fit statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

RSS_FLOOR = 1e-300


class DesignError(ValueError):
    """The refit design cannot be estimated."""


def student_t_sf(t: float, df: float) -> float:
    """Upper-tail probability P(T > t) of Student's t with ``df`` degrees of freedom.

    Uses the regularized incomplete beta function,
    P(|T| > |t|) = I_x(df/2, 1/2) with x = df / (df + t^2).
    """
    if not df > 0:
        raise ValueError("df must be positive")
    t = float(t)
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(0.5 * df, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def _is_constant(col: np.ndarray) -> bool:
    return bool(np.all(col == col[0])) and col[0] != 0


def _first_dependent_column(D: np.ndarray) -> int | None:
    # column j is dependent when adding it does not raise the rank
    rank = 0
    for j in range(D.shape[1]):
        r = np.linalg.matrix_rank(D[:, : j + 1])
        if r == rank:
            return j
        rank = r
    return None


@dataclass
class RefitReport:
    """OLS fit summary. ``vif`` is NaN for the intercept column."""

    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_values: np.ndarray
    vif: np.ndarray
    rss: float
    r2: float
    adj_r2: float
    mae: float
    aic: float
    n: int
    p: int
    has_intercept: bool = field(default=True)

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "coefficients": [
                {"name": nm, "estimate": num(b), "se": num(s), "t": num(tv),
                 "p_value": num(pv), "vif": num(vf)}
                for nm, b, s, tv, pv, vf in zip(self.names, self.coef, self.se, self.t,
                                                 self.p_values, self.vif)
            ],
            "rss": num(self.rss),
            "r2": num(self.r2),
            "adj_r2": num(self.adj_r2),
            "mae": num(self.mae),
            "aic": num(self.aic),
            "n": self.n,
            "p": self.p,
        }


def gaussian_aic(rss: float, n: int, p: int) -> float:
    """N log(2 pi RSS / N) + N + 2 (p + 1); the extra parameter is the variance."""
    rss = max(float(rss), RSS_FLOOR)
    return n * math.log(2.0 * math.pi * rss / n) + n + 2.0 * (p + 1)


def _vif(D: np.ndarray, j: int, centered: bool) -> float:
    others = np.delete(D, j, axis=1)
    col = D[:, j]
    if others.shape[1] == 0:
        return 1.0
    coef, *_ = np.linalg.lstsq(others, col, rcond=None)
    res = col - others @ coef
    tss = float(np.sum((col - col.mean()) ** 2)) if centered else float(col @ col)
    if tss == 0:
        return math.inf
    r2 = 1.0 - float(res @ res) / tss
    return math.inf if r2 >= 1.0 else max(1.0 / (1.0 - r2), 1.0)


def ols_refit(y, design, names: list[str] | None = None) -> RefitReport:
    """Fit ``y`` on ``design`` by OLS and collect the usual statistics.

    R^2 is centered when the design contains a constant column and
    uncentered otherwise.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    D = np.asarray(design, dtype=np.float64)
    if D.ndim == 1:
        D = D[:, None]
    n, p = D.shape
    names = list(names) if names is not None else [f"c{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError("names length does not match the design")
    if D.shape[0] != y.shape[0]:
        raise ValueError("y and design must have the same number of rows")
    if n <= p:
        raise DesignError(f"need more observations than predictors (N={n}, p={p})")
    bad = _first_dependent_column(D)
    if bad is not None:
        raise DesignError(f"design is rank deficient: column {bad} ({names[bad]}) is collinear "
                          "with the preceding columns")

    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    fitted = D @ coef
    res = y - fitted
    rss = float(res @ res)
    df = n - p
    s2 = rss / df
    DtD_inv = np.linalg.inv(D.T @ D)
    se = np.sqrt(np.clip(np.diag(DtD_inv), 0.0, None) * s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.sign(coef) * np.inf)
    t = np.where((se == 0) & (coef == 0), 0.0, t)
    p_values = np.array([2.0 * student_t_sf(abs(tv), df) for tv in t])

    const = [j for j in range(p) if _is_constant(D[:, j])]
    has_intercept = bool(const)
    if has_intercept:
        tss = float(np.sum((y - y.mean()) ** 2))
        dof_total = n - 1
    else:
        tss = float(y @ y)
        dof_total = n
    if tss > 0:
        r2 = 1.0 - rss / tss
        adj = 1.0 - (1.0 - r2) * dof_total / df
    else:
        r2 = adj = 0.0 if rss > 0 else 1.0
    r2 = min(max(r2, 0.0), 1.0) if has_intercept else r2

    vif = np.array([math.nan if j in const else _vif(D, j, has_intercept) for j in range(p)])
    return RefitReport(
        names=names,
        coef=coef,
        se=se,
        t=t,
        p_values=p_values,
        vif=vif,
        rss=rss,
        r2=float(r2),
        adj_r2=float(adj),
        mae=float(np.mean(np.abs(res))),
        aic=gaussian_aic(rss, n, p),
        n=n,
        p=p,
        has_intercept=has_intercept,
    )
