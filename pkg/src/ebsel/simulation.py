"""Synthetic benchmark: correlated groups, a hidden signal column, EB vs LASSO.

Columns are numbered from 1 as ``z1 .. z301``. Two groups share a latent
factor, ``{1, 2, 3, 4}`` and ``{5, 6}``; the response is
``z3 + z6 + z7 + z8 + noise`` and ``z8`` is withheld from the returned data,
so 300 putative columns remain.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .columns import InMemoryColumns
from .diagnostics import ols_refit
from .em import EmConfig, run_em
from .lasso import LassoConfig, lasso_cv_select
from .model import Dataset
from .rng import child_seeds, make_rng


class StudyAborted(RuntimeError):
    """Too many replicates failed."""


@dataclass
class SimDesign:
    n: int = 40
    k_total: int = 301
    groups: tuple[tuple[int, ...], ...] = ((1, 2, 3, 4), (5, 6))
    target_corr: float = 0.99
    noise_var: float = 0.1
    truth: tuple[int, ...] = (3, 6, 7, 8)
    dropped: tuple[int, ...] = (8,)
    replicates: int = 100
    seed: int = 0
    run_lasso: bool = True
    max_failure_rate: float = 0.1

    def __post_init__(self):
        self.groups = tuple(tuple(int(j) for j in g) for g in self.groups)
        self.truth = tuple(int(j) for j in self.truth)
        self.dropped = tuple(int(j) for j in self.dropped)
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 < self.target_corr < 1:
            raise ValueError("target_corr must lie in (0, 1)")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")
        used = [j for g in self.groups for j in g] + list(self.truth) + list(self.dropped)
        if any(not 1 <= j <= self.k_total for j in used):
            raise ValueError("column numbers must lie in [1, k_total]")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def delta(self) -> float:
        """Idiosyncratic scale giving population correlation ``target_corr``."""
        return math.sqrt(1.0 / self.target_corr - 1.0)

    @property
    def signal_block(self) -> tuple[int, ...]:
        """Columns 1 .. max(signal, group) that are not withheld."""
        top = max([j for g in self.groups for j in g] + [j for j in self.truth if j not in self.dropped])
        return tuple(j for j in range(1, top + 1) if j not in self.dropped)

    @property
    def reference_model(self) -> tuple[int, ...]:
        return tuple(j for j in self.truth if j not in self.dropped)


@dataclass
class SimTruth:
    numbers: list[int]  # original column number of each returned column
    reference_model: tuple[int, ...]
    signal_block: tuple[int, ...]


def generate_replicate(design: SimDesign, seed: int) -> tuple[Dataset, SimTruth]:
    """One synthetic dataset with an intercept as the only locked-in column."""
    rng = make_rng(seed)
    n, K = design.n, design.k_total
    Z = rng.standard_normal((n, K))
    for group in design.groups:
        w = rng.standard_normal(n)
        for j in group:
            Z[:, j - 1] = w + design.delta * rng.standard_normal(n)
    eps = rng.normal(0.0, math.sqrt(design.noise_var), n)
    y = Z[:, [j - 1 for j in design.truth]].sum(axis=1) + eps
    numbers = [j for j in range(1, K + 1) if j not in design.dropped]
    Zk = Z[:, [j - 1 for j in numbers]]
    Zsrc = InMemoryColumns(Zk, [f"z{j}" for j in numbers])
    data = Dataset(y, np.ones((n, 1)), Zsrc, y_name="y", x_names=["intercept"])
    return data, SimTruth(numbers, design.reference_model, design.signal_block)


@dataclass
class ReplicateRow:
    replicate: int
    seed: int
    status: str = "ok"
    error: str = ""
    eb_tp: int = 0
    eb_fp: int = 0
    eb_selected: str = ""
    r2_true: float = math.nan
    r2_eb: float = math.nan
    lasso_tp: int = -1
    lasso_fp: int = -1
    lasso_n_selected: int = -1
    r2_lasso: float = math.nan
    lasso_lambda: float = math.nan
    eb_loglik_initial: float = math.nan
    eb_loglik_final: float = math.nan
    eb_n_moves: int = 0
    eb_min_move_increase: float = math.nan
    eb_converged: bool = False


@dataclass
class SimReport:
    design: SimDesign
    rows: list[ReplicateRow] = field(default_factory=list)

    def ok_rows(self) -> list[ReplicateRow]:
        return [r for r in self.rows if r.status == "ok"]

    def summary(self) -> dict:
        ok = self.ok_rows()
        tp = np.array([r.eb_tp for r in ok])
        fp = np.array([r.eb_fp for r in ok])
        out = {
            "n": self.design.n,
            "replicates": len(self.rows),
            "failures": len(self.rows) - len(ok),
            "eb_tp_median": float(np.median(tp)) if ok else None,
            "eb_fp_median": float(np.median(fp)) if ok else None,
            "eb_prop_exact_tp": float(np.mean(tp == len(self.design.reference_model))) if ok else None,
            "eb_prop_zero_fp": float(np.mean(fp == 0)) if ok else None,
            "eb_max_tp": int(tp.max()) if ok else None,
            "r2_true_mean": float(np.mean([r.r2_true for r in ok])) if ok else None,
            "r2_eb_median": float(np.median([r.r2_eb for r in ok])) if ok else None,
        }
        if self.design.run_lasso and ok:
            out["lasso_tp_median"] = float(np.median([r.lasso_tp for r in ok]))
            out["lasso_fp_median"] = float(np.median([r.lasso_fp for r in ok]))
            out["r2_lasso_median"] = float(np.median([r.r2_lasso for r in ok]))
        return out

    def write_csv(self, path) -> None:
        names = list(ReplicateRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in self.rows:
                w.writerow([format_value(getattr(row, k)) for k in names])

    def write_json(self, path) -> None:
        doc = {"design": design_to_dict(self.design), "summary": self.summary()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def format_value(v) -> str:
    """Round-trip text for CSV cells: floats get 17 significant digits."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.17g}"
    return str(v)


def design_to_dict(design: SimDesign) -> dict:
    d = asdict(design)
    d["groups"] = [list(g) for g in design.groups]
    d["truth"] = list(design.truth)
    d["dropped"] = list(design.dropped)
    return d


def _r2_on(data: Dataset, columns: list[int]) -> float:
    D = np.column_stack([data.X, data.Z.fetch_many(columns)]) if columns else data.X
    return ols_refit(data.y, D).r2


def run_replicate(design: SimDesign, index: int, seed: int, em_config: EmConfig,
                  lasso_config: LassoConfig | None) -> ReplicateRow:
    data_seed, fit_seed, lasso_seed = child_seeds(seed, 3)
    data, truth = generate_replicate(design, data_seed)
    block = set(truth.signal_block)
    pos = {num: i for i, num in enumerate(truth.numbers)}
    row = ReplicateRow(index, seed)

    row.r2_true = _r2_on(data, [pos[j] for j in truth.reference_model])
    cfg = replace(em_config, seed=fit_seed)
    result, trace = run_em(data, cfg)
    chosen = [truth.numbers[k] for k in result.selected_indices]
    row.eb_tp = sum(1 for j in chosen if j in block)
    row.eb_fp = len(chosen) - row.eb_tp
    row.eb_selected = " ".join(f"z{j}" for j in sorted(chosen))
    row.r2_eb = _r2_on(data, sorted(result.selected_indices))
    row.eb_loglik_initial = trace.initial_loglik
    row.eb_loglik_final = trace.final_loglik
    moves = trace.moves
    row.eb_n_moves = len(moves)
    if moves:
        row.eb_min_move_increase = min(r.loglik_after_move - r.loglik_before_move for r in moves)
    row.eb_converged = result.converged

    if lasso_config is not None:
        lc = replace(lasso_config, seed=lasso_seed, n_threads=1)
        cv = lasso_cv_select(data.y, data.Z.to_array(), lc)
        picked = [truth.numbers[k] for k in cv.selected]
        row.lasso_tp = sum(1 for j in picked if j in block)
        row.lasso_fp = len(picked) - row.lasso_tp
        row.lasso_n_selected = len(picked)
        row.r2_lasso = cv.median_r2
        row.lasso_lambda = cv.lambda_star
    return row


def run_study(design: SimDesign, em_config: EmConfig | None = None,
              lasso_config: LassoConfig | None = None, n_threads: int = 1,
              progress=None) -> SimReport:
    """Run every replicate; failures are recorded, too many abort the study."""
    em_config = em_config or EmConfig(strategy="greedy", null_threshold=0.8)
    lasso_config = (lasso_config or LassoConfig()) if design.run_lasso else None
    seeds = child_seeds(design.seed, design.replicates)
    allowed = math.floor(design.max_failure_rate * design.replicates)

    def one(i):
        try:
            return run_replicate(design, i, seeds[i], em_config, lasso_config)
        except Exception as exc:  # recorded, not fatal
            return ReplicateRow(i, seeds[i], status="failed", error=f"{type(exc).__name__}: {exc}")

    report = SimReport(design)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = pool.map(one, range(design.replicates))
            for row in rows:
                report.rows.append(row)
                _check(report, allowed, progress)
    else:
        for i in range(design.replicates):
            report.rows.append(one(i))
            _check(report, allowed, progress)
    return report


def _check(report: SimReport, allowed: int, progress) -> None:
    failures = sum(r.status != "ok" for r in report.rows)
    if failures > allowed:
        last = next(r for r in reversed(report.rows) if r.status != "ok")
        raise StudyAborted(f"{failures} of {report.design.replicates} replicates failed; "
                           f"last error: {last.error}")
    if progress is not None:
        progress(report.rows[-1])

