import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ebsel.em import EmConfig, e_step, init_params, m_step_mean, run_em
from ebsel.model import Dataset, LatentState, ModelParams, log_likelihood
from ebsel.selection import (
    MoveCandidate,
    admit_batch,
    choose_move_greedy,
    choose_move_weighted,
    correlation_adjust,
    finalize_selection,
    posterior_threshold_update,
    propose_moves,
)

from oracles import dense_loglik

# ---------------------------------------------------------------------------
# posterior_threshold_update


@pytest.mark.parametrize("row, expected", [
    ((0.05, 0.9, 0.05), 0.0),
    ((0.1, 0.2, 0.7), 0.7),
    ((0.6, 0.2, 0.2), -0.6),
])
def test_threshold_update_examples(row, expected):
    assert posterior_threshold_update(np.array([row]), 0.8)[0] == pytest.approx(expected)


@given(P=st.lists(st.tuples(*[st.floats(0.001, 1)] * 3), min_size=1, max_size=20))
def test_threshold_update_idempotent(P):
    P = np.array(P)
    P /= P.sum(axis=1, keepdims=True)
    a = posterior_threshold_update(P, 0.8)
    b = posterior_threshold_update(P, 0.8)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# propose_moves


def fitted_state(y, Z, gamma):
    """Data, state and (beta, mu)-profiled parameters at a given gamma."""
    data = Dataset(y, np.ones((len(y), 1)), Z)
    params, state = init_params(data, EmConfig())
    state = LatentState(data, gamma)
    if state.L:
        beta, mu, _ = m_step_mean(data, state, params)
        params = ModelParams(beta, mu, params.sigma2, params.sigma2_e, params.p)
    return data, state, params


def test_no_moves_when_gains_small():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((30, 5))
    data, state, params = fitted_state(rng.standard_normal(30), Z, np.zeros(5))
    assert propose_moves(data, state, params, EmConfig(delta=1e6)) == []


def test_signal_column_proposed_with_dense_gain():
    rng = np.random.default_rng(2)
    N, K = 30, 10
    Z = rng.standard_normal((N, K))
    y = Z[:, 6] + 0.2 * rng.standard_normal(N)
    data, state, params = fitted_state(y, Z, np.zeros(K))
    cands = {c.k: c for c in propose_moves(data, state, params, EmConfig())}
    assert 6 in cands and cands[6].s_star == 1
    assert cands[6].gain > 10 * math.log(2)
    # dense check: profile (beta, mu) by least squares at the candidate gamma
    g = np.zeros(K)
    g[6] = 1.0
    W = np.column_stack([np.ones(N), Z[:, 6]])
    S = params.sigma2_e * np.eye(N) + params.sigma2 * np.outer(Z[:, 6], Z[:, 6])
    Si = np.linalg.inv(S)
    coef = np.linalg.solve(W.T @ Si @ W, W.T @ Si @ y)
    args = dict(y=y, X=np.ones((N, 1)), Z=Z, sigma2=params.sigma2, sigma2_e=params.sigma2_e, p=params.p)
    after = dense_loglik(gamma=g, beta=coef[:1], mu=coef[1], **args)
    beta0 = np.array([y.mean()])
    before = dense_loglik(gamma=np.zeros(K), beta=beta0, mu=params.mu, **args)
    assert cands[6].gain == pytest.approx(after - before, rel=1e-8)


def test_spurious_active_column_removal_proposed():
    rng = np.random.default_rng(3)
    N, K = 40, 6
    Z = rng.standard_normal((N, K))
    y = Z[:, 0] + Z[:, 1] + 0.3 * rng.standard_normal(N)
    data, state, params = fitted_state(y, Z, np.array([1.0, 1.0, 0, 0, 1.0, 0]))
    params = ModelParams(params.beta, params.mu, 0.01, 0.1, params.p)
    cands = {c.k: c for c in propose_moves(data, state, params, EmConfig())}
    assert 4 in cands and cands[4].s_star == 0 and cands[4].gain > 0


def test_guard_blocks_near_duplicate():
    rng = np.random.default_rng(4)
    N, K = 30, 4
    Z = rng.standard_normal((N, K))
    Z[:, 1] = Z[:, 0] + 0.01 * rng.standard_normal(N)  # |r| > 0.975
    y = Z[:, 0] + 0.2 * rng.standard_normal(N)
    data, state, params = fitted_state(y, Z, np.array([1.0, 0, 0, 0]))
    guarded = {c.k for c in propose_moves(data, state, params, EmConfig())}
    open_ = {c.k for c in propose_moves(data, state, params, EmConfig(correlation_mode="off"))}
    assert 1 not in guarded
    assert guarded <= open_


# ---------------------------------------------------------------------------
# choose_move_greedy / choose_move_weighted


def test_greedy_examples():
    assert choose_move_greedy([MoveCandidate(1, 1, 3.0), MoveCandidate(2, 1, 1.0)]).k == 1
    assert choose_move_greedy([]) is None
    assert choose_move_greedy([MoveCandidate(5, 1, 2.0), MoveCandidate(3, -1, 2.0)]).k == 3


@given(gains=st.lists(st.sampled_from([0.8, 1.0, 2.5, 4.0]), min_size=1, max_size=8),
       perm_seed=st.integers(0, 1000))
def test_greedy_permutation_invariant(gains, perm_seed):
    cands = [MoveCandidate(k, 1, g) for k, g in enumerate(gains)]
    shuffled = list(np.random.default_rng(perm_seed).permutation(len(cands)))
    assert choose_move_greedy([cands[i] for i in shuffled]) == choose_move_greedy(cands)


def test_weighted_single_candidate():
    rng = np.random.default_rng(0)
    c = MoveCandidate(4, -1, 0.9)
    assert all(choose_move_weighted([c], rng) == c for _ in range(100))
    assert choose_move_weighted([], rng) is None


@pytest.mark.parametrize("gains, expected", [((2.0, 2.0), (0.5, 0.5)), ((3.0, 1.0), (0.75, 0.25))])
def test_weighted_frequencies(gains, expected):
    rng = np.random.default_rng(123)
    cands = [MoveCandidate(k, 1, g) for k, g in enumerate(gains)]
    draws = np.array([choose_move_weighted(cands, rng).k for _ in range(10_000)])
    freq = np.bincount(draws, minlength=2) / len(draws)
    np.testing.assert_allclose(freq, expected, atol=0.05)


def test_weighted_order_independent():
    cands = [MoveCandidate(k, 1, g) for k, g in enumerate((1.0, 2.0, 3.0))]
    a = [choose_move_weighted(cands, np.random.default_rng(s)).k for s in range(50)]
    b = [choose_move_weighted(cands[::-1], np.random.default_rng(s)).k for s in range(50)]
    assert a == b


# ---------------------------------------------------------------------------
# correlation_adjust


def test_adjust_examples():
    np.testing.assert_allclose(correlation_adjust([0.2, 0.5, 0.3], 1.0), [0, 1, 0])
    np.testing.assert_allclose(correlation_adjust([0.2, 0.5, 0.3], 0.0), [0.2, 0.5, 0.3])
    np.testing.assert_allclose(correlation_adjust([0.2, 0.5, 0.3], 0.5), [0.1, 0.75, 0.15], rtol=1e-14)


@given(P=st.tuples(*[st.floats(0, 1)] * 3).filter(lambda v: sum(v) > 1e-6), C=st.floats(0, 1))
def test_adjust_stays_on_simplex(P, C):
    P = np.array(P) / sum(P)
    out = correlation_adjust(P, C)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(out >= -1e-15) and np.all(out <= 1 + 1e-15)


# ---------------------------------------------------------------------------
# finalize_selection


def _state_with(gamma):
    K = len(gamma)
    data = Dataset(np.arange(3.0), np.ones((3, 1)), np.ones((3, K)))
    return LatentState(data, gamma)


def test_finalize_all_null():
    P = np.tile([0.0, 1.0, 0.0], (3, 1))
    assert finalize_selection(_state_with([1.0, 0, -1.0]), P, EmConfig()) == []


def test_finalize_single_positive():
    P = np.array([[0.05, 0.1, 0.85]])
    out = finalize_selection(_state_with([1.0]), P, EmConfig())
    assert [(c.index, c.sign) for c in out] == [(0, 1)]


def test_finalize_sorted_by_null_probability():
    P = np.array([[0.0, 0.3, 0.7], [0.95, 0.05, 0.0]])
    out = finalize_selection(_state_with([1.0, -1.0]), P, EmConfig())
    assert [(c.index, c.sign) for c in out] == [(1, -1), (0, 1)]


# ---------------------------------------------------------------------------
# correlation guard over a whole fit


def _max_abs_corr(Z, idx):
    if len(idx) < 2:
        return 0.0
    R = np.corrcoef(Z[:, idx], rowvar=False)
    np.fill_diagonal(R, 0.0)
    return float(np.abs(R).max())


@pytest.mark.parametrize("strategy", ["greedy", "weighted", "posterior_threshold"])
def test_guard_holds_on_every_accepted_move(strategy):
    rng = np.random.default_rng(7)
    N, K = 40, 30
    Z = rng.standard_normal((N, K))
    w = rng.standard_normal(N)
    for j in range(6):
        Z[:, j] = w + 0.05 * rng.standard_normal(N)  # pairwise |r| near 0.998
    y = 2 * w + Z[:, 10] + 0.3 * rng.standard_normal(N)
    cfg = EmConfig(strategy=strategy, seed=1)
    result, trace = run_em(Dataset(y, np.ones((N, 1)), Z), cfg)
    for rec in trace.records:
        assert _max_abs_corr(Z, list(rec.active)) < cfg.correlation_cutoff
    assert _max_abs_corr(Z, result.selected_indices) < cfg.correlation_cutoff


def test_admit_batch_keeps_most_certain():
    Z = np.random.default_rng(0).standard_normal((20, 3))
    Z[:, 2] = Z[:, 0]
    C = np.corrcoef(Z, rowvar=False) ** 2
    P = np.array([[0, 0.2, 0.8], [0, 0.5, 0.5], [0, 0.1, 0.9]])
    out = admit_batch(np.array([0.8, 0.5, 0.9]), np.zeros(3), P, lambda k, o: C[k, o], 0.975)
    np.testing.assert_array_equal(out, [0.0, 0.5, 0.9])
