"""Approximate EM for the three-component mixture regression model.

One iteration is: E-step over every putative column, a selection move (or
a batch gamma update), then the M-step for (beta, mu), the variance
components and the mixture weights.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg

from .model import (
    LOG_2PI,
    SIGMA_FLOOR,
    ComputationError,
    Dataset,
    LatentState,
    ModelParams,
    build_covariance,
    clamp_probabilities,
    gamma_class,
    log_likelihood,
    log_prior,
    residual,
)
from .rng import make_rng
from . import selection as sel

Strategy = Literal["posterior_threshold", "greedy", "weighted"]


@dataclass
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    null_threshold: float = 0.8
    delta: float = math.log(2.0)
    strategy: Strategy = "greedy"
    seed: int = 0
    correlation_mode: Literal["guard", "shrink", "off"] = "guard"
    correlation_cutoff: float = 0.975  # on |r|
    init_p: tuple[float, float, float] = (0.9, 0.05, 0.05)
    init_beta: list[float] | None = None
    init_mu: float | None = None
    init_sigma2: float | None = None
    init_sigma2_e: float | None = None
    profile_mean: bool = True
    gain_includes_prior: bool = True
    n_threads: int = 1
    block_size: int = 512

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0 < self.null_threshold < 1:
            raise ValueError("null_threshold must lie in (0, 1)")
        if self.strategy not in ("posterior_threshold", "greedy", "weighted"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.correlation_mode not in ("guard", "shrink", "off"):
            raise ValueError(f"unknown correlation mode {self.correlation_mode!r}")
        if not 0 < self.correlation_cutoff <= 1:
            raise ValueError("correlation_cutoff must lie in (0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        self.init_p = tuple(float(v) for v in self.init_p)


@dataclass
class IterationRecord:
    iteration: int
    loglik: float
    n_active: int
    params: dict
    move: sel.MoveCandidate | None = None
    loglik_before_move: float | None = None
    loglik_after_move: float | None = None
    n_changed: int = 0
    mu_dropped: bool = False
    active: tuple = ()

    def to_dict(self) -> dict:
        d = {
            "iteration": self.iteration,
            "loglik": self.loglik,
            "n_active": self.n_active,
            "active": list(self.active),
            "params": self.params,
            "n_changed": self.n_changed,
            "mu_dropped": self.mu_dropped,
        }
        if self.move is not None:
            d["move"] = {"k": self.move.k, "sign": self.move.s_star, "gain": self.move.gain,
                         "loglik_before": self.loglik_before_move,
                         "loglik_after": self.loglik_after_move}
        return d


@dataclass
class IterationTrace:
    initial_loglik: float
    records: list[IterationRecord] = field(default_factory=list)

    @property
    def moves(self) -> list[IterationRecord]:
        return [r for r in self.records if r.move is not None]

    @property
    def final_loglik(self) -> float:
        return self.records[-1].loglik if self.records else self.initial_loglik

    def summary(self) -> dict:
        return {
            "initial_loglik": self.initial_loglik,
            "final_loglik": self.final_loglik,
            "n_iter": len(self.records),
            "n_moves": len(self.moves),
            "moves": [r.to_dict()["move"] | {"iteration": r.iteration} for r in self.moves],
        }


@dataclass
class FitResult:
    selected: list[sel.SelectedColumn]
    gamma: np.ndarray  # hard values in {-1, 0, 1}
    posteriors: np.ndarray  # K x 3, ordered (-1, 0, +1)
    params: ModelParams
    loglik: float
    n_iter: int
    converged: bool
    strategy: str
    seed: int

    @property
    def selected_indices(self) -> list[int]:
        return [c.index for c in self.selected]


@dataclass
class EStepResult:
    loglik: np.ndarray  # K x 3: log-likelihood with gamma_k set to -1, 0, +1
    raw_posteriors: np.ndarray
    posteriors: np.ndarray  # after the correlation adjustment
    base_loglik: float
    corr2: np.ndarray  # max squared correlation with the other active columns
    move_loglik: np.ndarray | None = None  # K x 3 with (beta, mu) re-fitted per candidate
    move_base: float | None = None


# ---------------------------------------------------------------------------
# initialization


def _first_dependent_column(X: np.ndarray) -> int | None:
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, : j + 1]) < j + 1:
            return j
    return None


def init_params(data: Dataset, config: EmConfig) -> tuple[ModelParams, LatentState]:
    """OLS start on the locked-in design with an empty active set."""
    X, y = data.X, data.y
    bad = _first_dependent_column(X)
    if bad is not None:
        raise ValueError(f"locked-in design is rank deficient at column {bad} ({data.x_names[bad]})")
    if data.J:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    else:
        beta = np.zeros(0)
    rss = float(np.sum((y - X @ beta) ** 2))
    s2 = max(rss / (2 * data.N), SIGMA_FLOOR)
    params = ModelParams(
        beta=beta if config.init_beta is None else config.init_beta,
        mu=0.0 if config.init_mu is None else config.init_mu,
        sigma2=s2 if config.init_sigma2 is None else config.init_sigma2,
        sigma2_e=s2 if config.init_sigma2_e is None else config.init_sigma2_e,
        p=clamp_probabilities(config.init_p, data.K),
    )
    return params, LatentState(data)


# ---------------------------------------------------------------------------
# E-step


def _quadratic_terms(handle, V, Zb, u):
    """a_k = z_k' Sigma^-1 z_k and b_k = z_k' u for the columns of ``Zb``."""
    a = np.einsum("ij,ij->j", Zb, Zb) / handle.sigma2_e
    if handle.L and handle.sigma2 > 0:
        C = V.T @ Zb
        a -= handle.sigma2 / handle.sigma2_e ** 2 * np.einsum("ij,ij->j", C, handle.solve_M(C))
    return a, Zb.T @ u


def _block_corr2(Zb, A_c, A_norm):
    if A_c.shape[1] == 0:
        return np.zeros(Zb.shape[1])
    Zc = Zb - Zb.mean(axis=0)
    zn = np.sqrt(np.einsum("ij,ij->j", Zc, Zc))
    denom = np.outer(zn, A_norm)
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.where(denom > 0, (Zc.T @ A_c) / denom, 0.0)
    return np.max(R ** 2, axis=1)


def _candidate_loglik(prior_rest, logp_sign, n, ld, q, a, b, sigma2, mu):
    """Log-likelihood for s = -1, 0, +1 from the quantities of the model
    without the candidate column (Sherman-Morrison on one appended column)."""
    out = np.empty((len(a), 3))
    const = prior_rest - 0.5 * n * LOG_2PI
    out[:, 1] = const + logp_sign[1] - 0.5 * (ld + q)
    denom = 1.0 + sigma2 * a
    ld_s = ld + np.log(denom)
    for col, s in ((0, -1.0), (2, 1.0)):
        quad = q - 2.0 * s * mu * b + mu * mu * a - sigma2 * (b - s * mu * a) ** 2 / denom
        out[:, col] = const + logp_sign[col] - 0.5 * (ld_s + quad)
    return out


def _mean_columns(data, state):
    """Stack [X, V 1, y]; the middle column is zero when nothing is active."""
    w = state.V().sum(axis=1) if state.L else np.zeros(data.N)
    return np.column_stack([data.X, w, data.y])


def _profile_quad(G, J, has_mu):
    """min over (beta, mu) of the GLS quadratic form, from the Gram matrix
    G = B' Sigma^-1 B of B = [X, w, y] (stacked over a leading axis)."""
    cols = list(range(J + 1 if has_mu else J))
    yy = G[..., J + 1, J + 1]
    if not cols:
        return yy
    A = G[..., cols, :][..., :, cols]
    b = G[..., cols, J + 1]
    return yy - np.einsum("...i,...i->...", b, _batched_solve(A, b))


def _batched_solve(A, b):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.einsum("...ij,...j->...i", np.linalg.pinv(A), b)


def _profiled_candidate_loglik(prior_rest, logp_sign, n, ld, a, H, GB, sigma2, J, has_mu):
    """Candidate log-likelihoods with (beta, mu) re-fitted by GLS for each
    candidate value, variance components held fixed.

    ``H`` holds z_k' Sigma^-1 [X, w, y] per candidate, ``GB`` the Gram of
    [X, w, y] under the model without the candidate.
    """
    K = len(a)
    m = J + 2
    out = np.empty((K, 3))
    const = prior_rest - 0.5 * n * LOG_2PI
    out[:, 1] = const + logp_sign[1] - 0.5 * (ld + _profile_quad(GB, J, has_mu))
    GU = np.empty((K, m + 1, m + 1))
    GU[:, :m, :m] = GB
    GU[:, :m, m] = H
    GU[:, m, :m] = H
    GU[:, m, m] = a
    g = GU[:, :, m]
    c = sigma2 / (1.0 + sigma2 * a)
    Gn = GU - c[:, None, None] * np.einsum("ki,kj->kij", g, g)
    ld_s = ld + np.log1p(sigma2 * a)
    for col, s in ((0, -1.0), (2, 1.0)):
        # fold s * z into the mu column: B_new = [X, w + s z, y]
        T = np.eye(m + 1)[:, :m]
        T[m, J] = s
        Gs = np.einsum("ia,kij,jb->kab", T, Gn, T)
        out[:, col] = const + logp_sign[col] - 0.5 * (ld_s + _profile_quad(Gs, J, True))
    return out


def _softmax_rows(ll):
    m = ll.max(axis=1, keepdims=True)
    w = np.exp(ll - m)
    return w / w.sum(axis=1, keepdims=True)


def e_step(data: Dataset, state: LatentState, params: ModelParams,
           config: EmConfig | None = None, n_threads: int | None = None) -> EStepResult:
    """Evaluate gamma_k in {-1, 0, 1} for every column with the rest frozen.

    Columns outside the active set are appended to the current factorization;
    active columns are first removed (one refactorization each, L is small)
    and then appended back.
    """
    config = config or EmConfig()
    n_threads = config.n_threads if n_threads is None else n_threads
    handle = build_covariance(state, params, data)
    r = residual(data, state, params)
    u = handle.solve(r)
    q = float(r @ u)
    ld = handle.log_det()
    counts = state.counts()
    cls = gamma_class(state.gamma)
    logp_sign = np.log(params.prior_by_sign())
    base = log_prior(counts, params.p) - 0.5 * data.N * LOG_2PI - 0.5 * (ld + q)
    prior_rest = log_prior(counts, params.p) - np.log(params.p)[cls]

    profile = config.profile_mean
    J = data.J
    if profile:
        B = _mean_columns(data, state)
        TB = handle.solve(B)
        GB = B.T @ TB

    active = state.active
    V = handle.V
    A_c = state.Z_L - state.Z_L.mean(axis=0)
    A_norm = np.sqrt(np.einsum("ij,ij->j", A_c, A_c))

    def work(bounds):
        start, stop = bounds
        Zb = data.Z.fetch_block(start, stop)
        a, b = _quadratic_terms(handle, V, Zb, u)
        H = Zb.T @ TB if profile else None
        return a, b, _block_corr2(Zb, A_c, A_norm), H

    blocks = list(data.Z.blocks(config.block_size))
    if n_threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(bl) for bl in blocks]
    a = np.concatenate([p[0] for p in parts])
    b = np.concatenate([p[1] for p in parts])
    corr2 = np.concatenate([p[2] for p in parts])

    K = data.K
    inactive = np.ones(K, dtype=bool)
    inactive[active] = False
    ll = _candidate_loglik(prior_rest, logp_sign, data.N, np.full(K, ld), np.full(K, q),
                           a, b, params.sigma2, params.mu)
    move_ll = None
    if profile:
        H = np.concatenate([p[3] for p in parts])
        move_ll = _profiled_candidate_loglik(prior_rest, logp_sign, data.N, ld, a, H, GB,
                                             params.sigma2, J, state.L > 0)

    for pos, k in enumerate(active):
        st = state.with_value(k, 0.0)
        h = build_covariance(st, params, data)
        rk = residual(data, st, params)
        uk = h.solve(rk)
        zk = state.Z_L[:, pos:pos + 1]
        ak, bk = _quadratic_terms(h, h.V, zk, uk)
        ldk = h.log_det()
        pr = prior_rest[k:k + 1]
        ll[k] = _candidate_loglik(pr, logp_sign, data.N, ldk, float(rk @ uk), ak, bk,
                                  params.sigma2, params.mu)[0]
        if profile:
            Bk = _mean_columns(data, st)
            TBk = h.solve(Bk)
            move_ll[k] = _profiled_candidate_loglik(pr, logp_sign, data.N, ldk, ak, zk.T @ TBk,
                                                    Bk.T @ TBk, params.sigma2, J, st.L > 0)[0]
        others = np.delete(np.arange(len(active)), pos)
        corr2[k] = _block_corr2(zk, A_c[:, others], A_norm[others])[0] if len(others) else 0.0

    raw = _softmax_rows(ll)
    if config.correlation_mode == "guard":
        C = sel.guard_blocks(corr2, ~inactive, config.correlation_cutoff).astype(float)
        post = sel.correlation_adjust(raw, C)
    elif config.correlation_mode == "shrink":
        post = sel.correlation_adjust(raw, np.where(inactive, corr2, 0.0))
    else:
        post = raw
    move_base = None
    if profile:
        move_base = float(log_prior(counts, params.p) - 0.5 * data.N * LOG_2PI
                          - 0.5 * (ld + _profile_quad(GB, J, state.L > 0)))
    return EStepResult(ll, raw, post, float(base), corr2, move_ll, move_base)


def _without_column(data, state, params, k, pos):
    """(ld, q, a, b) for column ``k`` evaluated against the model without it."""
    st = state.with_value(k, 0.0)
    h = build_covariance(st, params, data)
    rk = residual(data, st, params)
    uk = h.solve(rk)
    zk = state.Z_L[:, pos]
    ak, bk = _quadratic_terms(h, h.V, zk[:, None], uk)
    return h.log_det(), float(rk @ uk), ak[0], bk[0]


def e_step_posteriors(data: Dataset, state: LatentState, params: ModelParams, k: int,
                      method: Literal["lowrank", "refactor"] = "lowrank") -> np.ndarray:
    """Posterior (P_-1, P_0, P_+1) for column ``k`` by Bayes' rule.

    ``refactor`` rebuilds the covariance from scratch for each candidate
    value; ``lowrank`` appends the column to the current factorization.
    """
    if method == "refactor":
        ll = np.array([log_likelihood(data, state.with_value(k, s), params) for s in (-1.0, 0.0, 1.0)])
        return _softmax_rows(ll[None, :])[0]
    active = state.active.tolist()
    if k in active:
        ld, q, a, b = _without_column(data, state, params, k, active.index(k))
    else:
        handle = build_covariance(state, params, data)
        r = residual(data, state, params)
        u = handle.solve(r)
        ld, q = handle.log_det(), float(r @ u)
        a, b = (v[0] for v in _quadratic_terms(handle, handle.V, data.Z.fetch(k)[:, None], u))
    cls = gamma_class(state.gamma[k])
    prior_rest = log_prior(state.counts(), params.p) - np.log(params.p[cls])
    ll = _candidate_loglik(np.array([prior_rest]), np.log(params.prior_by_sign()), data.N,
                           np.array([ld]), np.array([q]), np.array([a]), np.array([b]),
                           params.sigma2, params.mu)
    return _softmax_rows(ll)[0]


# ---------------------------------------------------------------------------
# M-step


def m_step_mean(data: Dataset, state: LatentState, params: ModelParams, handle=None):
    """GLS estimate of (beta, mu). Returns ``(beta, mu, mu_dropped)``."""
    handle = handle or build_covariance(state, params, data)
    X, y = data.X, data.y
    if state.L == 0:
        if data.J == 0:
            return params.beta.copy(), params.mu, True
        return _gls(handle, X, y), params.mu, True
    W = np.column_stack([X, state.V().sum(axis=1)])
    try:
        coef = _gls(handle, W, y)
        return coef[:-1], float(coef[-1]), False
    except linalg.LinAlgError:
        beta = _gls(handle, X, y) if data.J else params.beta.copy()
        return beta, params.mu, True


def _gls(handle, W, y):
    SiW = handle.solve(W)
    A = W.T @ SiW
    rhs = SiW.T @ y
    if np.linalg.cond(A) > 1e13:
        raise linalg.LinAlgError("W' Sigma^-1 W is singular")
    return linalg.solve(A, rhs, assume_a="pos")


def m_step_variances(data: Dataset, state: LatentState, params: ModelParams, handle=None):
    """One EM update of (sigma2_e, sigma2).

    ``params`` carries the fresh (beta, mu) and the previous variances, which
    also define ``handle``.
    """
    handle = handle or build_covariance(state, params, data)
    r = residual(data, state, params)
    N, L = data.N, state.L
    if L == 0:
        return max(float(r @ r) / N, SIGMA_FLOOR), params.sigma2
    s2, s2e = params.sigma2, params.sigma2_e
    u = handle.solve(r)
    VtV = handle.VtV
    MinvVtV = handle.solve_M(VtV)
    # trace[s2e I - s2e^2 Sigma^-1] = s2 * trace(M^-1 V'V)
    tau_e = s2 * float(np.trace(MinvVtV)) + s2e ** 2 * float(u @ u)
    # V' Sigma^-1 V = V'V / s2e - (s2 / s2e^2) V'V M^-1 V'V
    VSV = VtV / s2e - (s2 / s2e ** 2) * (VtV @ MinvVtV)
    Vu = handle.V.T @ u
    tau_r = s2 * L - s2 ** 2 * float(np.trace(VSV)) + s2 ** 2 * float(Vu @ Vu)
    return max(tau_e / N, SIGMA_FLOOR), max(tau_r / L, 0.0)


def m_step_mixture(posteriors: np.ndarray, K: int | None = None) -> np.ndarray:
    """Mixture weights (p0, p1, p2) from mean responsibilities, then clamped."""
    P = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    K = K or P.shape[0]
    mean = P.mean(axis=0)
    return clamp_probabilities([mean[sel.NULL], mean[sel.POS], mean[sel.NEG]], K)


# ---------------------------------------------------------------------------
# driver


def _pairwise_corr2_fn(data: Dataset):
    cache: dict[int, np.ndarray] = {}

    def col(k):
        if k not in cache:
            z = data.Z.fetch(k)
            z = z - z.mean()
            n = np.linalg.norm(z)
            cache[k] = z / n if n > 0 else z
        return cache[k]

    def corr2(k, others):
        zk = col(k)
        return np.array([(zk @ col(j)) ** 2 for j in others])

    return corr2


def canonical_orientation(state: LatentState, params: ModelParams):
    """Flip to the mirror solution with mu >= 0.

    (gamma, mu, p1, p2) and (-gamma, -mu, p2, p1) give the same likelihood,
    so after the flip a reported sign is the sign of the column's effect.
    """
    if params.mu >= 0 or state.L == 0:
        return state, params
    flipped = LatentState(state.data, -state.gamma, state._columns)
    p = params.p
    return flipped, ModelParams(params.beta.copy(), -params.mu, params.sigma2, params.sigma2_e,
                                np.array([p[0], p[2], p[1]]))


def run_em(data: Dataset, config: EmConfig, rng: np.random.Generator | None = None):
    """Fit the model; returns ``(FitResult, IterationTrace)``."""
    rng = rng if rng is not None else make_rng(config.seed)
    params, state = init_params(data, config)
    ll_prev = log_likelihood(data, state, params)
    if not np.isfinite(ll_prev):
        raise ComputationError("initial log-likelihood is not finite")
    trace = IterationTrace(initial_loglik=ll_prev)
    corr_fn = _pairwise_corr2_fn(data)
    converged = False

    for it in range(config.max_iter):
        est = e_step(data, state, params, config)
        record = IterationRecord(it, float("nan"), 0, {})
        if config.strategy == "posterior_threshold":
            new_gamma = sel.posterior_threshold_update(est.posteriors, config.null_threshold)
            if config.correlation_mode == "guard":
                new_gamma = sel.admit_batch(new_gamma, state.gamma, est.posteriors, corr_fn,
                                            config.correlation_cutoff)
            record.n_changed = int(np.sum(np.sign(new_gamma) != np.sign(state.gamma)))
            state = LatentState(data, new_gamma, state._columns)
        else:
            cands = sel.propose_moves(data, state, params, config, estep=est)
            if config.strategy == "greedy":
                move = sel.choose_move_greedy(cands)
            else:
                move = sel.choose_move_weighted(cands, rng)
            if move is not None:
                state.set(move.k, float(move.s_star))
                record.move = move
                record.loglik_before_move = est.base_loglik
                after = params
                if config.profile_mean:
                    beta, mu, _ = m_step_mean(data, state, params)
                    after = ModelParams(beta, mu, params.sigma2, params.sigma2_e, params.p)
                record.loglik_after_move = log_likelihood(data, state, after)
                record.n_changed = 1

        handle = build_covariance(state, params, data)
        beta, mu, dropped = m_step_mean(data, state, params, handle)
        mid = ModelParams(beta, mu, params.sigma2, params.sigma2_e, params.p)
        s2e, s2 = m_step_variances(data, state, mid, handle)
        p = m_step_mixture(est.posteriors, data.K)
        params = ModelParams(beta, mu, s2, s2e, p)
        ll = log_likelihood(data, state, params)
        if not np.isfinite(ll):
            trace.records.append(record)
            raise ComputationError(f"non-finite log-likelihood at iteration {it}; trace: {trace.summary()}")
        record.loglik = ll
        record.n_active = state.L
        record.active = tuple(int(k) for k in state.active)
        record.params = params.to_dict()
        record.mu_dropped = dropped
        trace.records.append(record)
        if record.n_changed == 0 and abs(ll - ll_prev) < config.tol * (1.0 + abs(ll_prev)):
            converged = True
            break
        ll_prev = ll

    state, params = canonical_orientation(state, params)
    final = e_step(data, state, params, config)
    chosen = sel.finalize_selection(state, final.posteriors, config, data.z_names)
    hard = np.zeros(data.K)
    for c in chosen:
        hard[c.index] = c.sign
    result = FitResult(
        selected=chosen,
        gamma=hard,
        posteriors=final.posteriors,
        params=params,
        loglik=final.base_loglik,
        n_iter=len(trace.records),
        converged=converged,
        strategy=config.strategy,
        seed=config.seed,
    )
    return result, trace
