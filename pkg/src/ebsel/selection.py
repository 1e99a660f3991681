"""Variable-selection rules driven by the E-step output.

Posterior rows are always ordered as gamma = (-1, 0, +1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

NEG, NULL, POS = 0, 1, 2
SIGNS = np.array([-1, 0, 1])


@dataclass(frozen=True)
class MoveCandidate:
    k: int
    s_star: int
    gain: float


@dataclass(frozen=True)
class SelectedColumn:
    index: int
    name: str
    sign: int
    p_null: float
    posterior: float  # posterior probability of the reported sign

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name, "sign": self.sign,
                "p_null": self.p_null, "posterior": self.posterior}


def posterior_threshold_update(posteriors: np.ndarray, null_threshold: float) -> np.ndarray:
    """Soft gamma from posteriors: zero when P0 exceeds the threshold, else the
    signed probability of the more likely non-null class."""
    P = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    gamma = np.where(P[:, POS] > P[:, NEG], P[:, POS], -P[:, NEG])
    gamma[P[:, NULL] > null_threshold] = 0.0
    return gamma


def correlation_adjust(posteriors, C) -> np.ndarray:
    """Shrink the non-null posteriors by ``1 - C`` and return the mass to P0.

    Works on a single 3-vector or a K x 3 matrix with a length-K ``C``.
    """
    P = np.asarray(posteriors, dtype=np.float64)
    shrink = 1.0 - np.clip(np.asarray(C, dtype=np.float64), 0.0, 1.0)
    out = P.copy()
    out[..., NEG] = shrink * P[..., NEG]
    out[..., POS] = shrink * P[..., POS]
    out[..., NULL] = 1.0 - out[..., NEG] - out[..., POS]
    return out


def guard_blocks(corr2: np.ndarray, active_mask: np.ndarray, cutoff: float) -> np.ndarray:
    """True for inactive columns whose squared correlation with some active
    column reaches ``cutoff**2`` (cutoff is on |r|)."""
    return (~active_mask) & (corr2 >= cutoff ** 2)


def propose_moves(data, state, params, config, estep=None) -> list[MoveCandidate]:
    """Candidates whose best single-column change gains more than ``delta``.

    ``estep`` may carry a precomputed E-step for the same (state, params).
    """
    if estep is None:
        from .em import e_step
        estep = e_step(data, state, params, config)
    if estep.move_loglik is not None:
        ll, base = estep.move_loglik, estep.move_base
    else:
        ll, base = estep.loglik, estep.base_loglik
    if not config.gain_includes_prior:
        # likelihood ratio only: swap each candidate's prior term for the current one
        logp_sign = np.log(params.prior_by_sign())
        current_logp = logp_sign[np.sign(state.gamma).astype(int) + 1]
        ll = ll - logp_sign[None, :] + current_logp[:, None]
    order = [POS, NEG, NULL]  # tie-break: prefer +1, then -1
    best_idx = np.array(order)[np.argmax(ll[:, order], axis=1)]
    gains = ll[np.arange(len(ll)), best_idx] - base
    s_star = SIGNS[best_idx]
    current = np.sign(state.gamma).astype(int)
    ok = (gains > config.delta) & (s_star != current)
    if config.correlation_mode == "guard":
        entering = (current == 0) & (s_star != 0)
        blocked = entering & (estep.corr2 >= config.correlation_cutoff ** 2)
        ok &= ~blocked
    return [MoveCandidate(int(k), int(s_star[k]), float(gains[k])) for k in np.flatnonzero(ok)]


def choose_move_greedy(candidates: Sequence[MoveCandidate]) -> MoveCandidate | None:
    if not candidates:
        return None
    return min(candidates, key=lambda c: (-c.gain, c.k))


def choose_move_weighted(candidates: Sequence[MoveCandidate], rng: np.random.Generator) -> MoveCandidate | None:
    """Sample a candidate with probability proportional to its gain."""
    if not candidates:
        return None
    cands = sorted(candidates, key=lambda c: c.k)
    w = np.array([c.gain for c in cands])
    cdf = np.cumsum(w / w.sum())
    i = int(np.searchsorted(cdf, rng.random(), side="right"))
    return cands[min(i, len(cands) - 1)]


def finalize_selection(state, posteriors: np.ndarray, config, names=None) -> list[SelectedColumn]:
    """Active columns with P0 at or below the null threshold, most certain first."""
    P = np.asarray(posteriors)
    names = names if names is not None else [f"z{k + 1}" for k in range(len(P))]
    keep = np.flatnonzero((state.gamma != 0) & (P[:, NULL] <= config.null_threshold))
    out = []
    for k in keep:
        if P[k, POS] > P[k, NEG]:
            sign = 1
        elif P[k, NEG] > P[k, POS]:
            sign = -1
        else:
            sign = 1 if state.gamma[k] > 0 else -1
        out.append(SelectedColumn(int(k), names[k], sign, float(P[k, NULL]),
                                  float(P[k, POS] if sign > 0 else P[k, NEG])))
    out.sort(key=lambda c: (c.p_null, c.index))
    return out


def admit_batch(gamma_new: np.ndarray, gamma_old: np.ndarray, posteriors: np.ndarray,
                corr_fn, cutoff: float) -> np.ndarray:
    """Apply the correlation guard to a batch update.

    Columns that were already active stay; entering columns are admitted one
    at a time in order of increasing P0, each checked against everything
    admitted so far. ``corr_fn(k, others)`` returns squared correlations.
    """
    gamma = gamma_new.copy()
    kept = [k for k in np.flatnonzero(gamma_new) if gamma_old[k] != 0]
    entering = [k for k in np.flatnonzero(gamma_new) if gamma_old[k] == 0]
    entering.sort(key=lambda k: (posteriors[k, NULL], k))
    admitted = list(kept)
    for k in entering:
        if admitted and np.max(corr_fn(k, admitted)) >= cutoff ** 2:
            gamma[k] = 0.0
        else:
            admitted.append(k)
    return gamma
