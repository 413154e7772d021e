"""Online posterior-predictive distributions for the next reported cycle.

For a user history d_i and fitted hyperparameters, prior draws theta_m are
importance-weighted by p(d_i | theta_m). The predictive over the next
reported length d* mixes, for every draw and skip count s*, a Poisson with
rate lam_m (s*+1) that is renormalized over the grid {0..D}. Conditioning on
d* > d_current only truncates and renormalizes this mixture, so the weights
are computed once per user and reused for every day.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from ._parallel import map_chunks
from .errors import DomainError, NumericalError
from .model import (
    DEFAULT_D,
    DEFAULT_M,
    DEFAULT_S,
    CycleHistory,
    Hyperparameters,
    log_likelihood_matrix,
    log_skip_pmf,
    make_rng,
    sample_user_params,
)

S0 = "s0"  # next reported cycle assumed free of skips
SFREE = "sfree"  # skip count of the next cycle integrated out
MODES = (S0, SFREE)
MODE_ALIASES = {"assume-no-skip": S0, "allow-skips": SFREE, S0: S0, SFREE: SFREE}

_KEY_PREDICT = 11
# pairs whose log weight is this far below the largest are dropped; their
# total relative contribution stays below ~1e-11
_LOG_PRUNE = 40.0


def canonical_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[mode]
    except KeyError:
        raise DomainError(f"unknown mode {mode!r}; expected one of {sorted(MODE_ALIASES)}") from None


@dataclass(frozen=True)
class PredictiveDistribution:
    support: np.ndarray
    probabilities: np.ndarray

    def mean(self) -> float:
        return float(np.dot(self.support, self.probabilities))

    def argmax(self) -> int:
        return int(self.support[int(np.argmax(self.probabilities))])


def truncate_pmf(pmf: np.ndarray, d_current: int) -> PredictiveDistribution:
    """Condition a pmf over {0..D} on d* > d_current."""
    D = len(pmf) - 1
    if not 0 <= d_current < D:
        raise DomainError(f"d_current must lie in [0, {D}), got {d_current}")
    tail = pmf[d_current + 1 :]
    mass = float(tail.sum())
    if not mass > 1e-300:
        raise NumericalError(f"conditioning event numerically impossible: P(d* > {d_current}) = {mass:.3g}")
    return PredictiveDistribution(np.arange(d_current + 1, D + 1), tail / mass)


def conditional_expectations(pmf: np.ndarray, days: Sequence[int]) -> np.ndarray:
    """E[d* | d* > d] for every d in ``days``, from one unconditional pmf."""
    grid = np.arange(len(pmf), dtype=float)
    # suffix sums; entry k is the sum over d* >= k
    mass = np.cumsum(pmf[::-1])[::-1]
    first = np.cumsum((grid * pmf)[::-1])[::-1]
    out = np.empty(len(days))
    for j, d in enumerate(days):
        if not 0 <= d < len(pmf) - 1:
            raise DomainError(f"d_current {d} outside the grid")
        if not mass[d + 1] > 1e-300:
            raise NumericalError(f"conditioning event numerically impossible at d_current={d}")
        out[j] = first[d + 1] / mass[d + 1]
    return out


class Predictor:
    """Posterior-predictive engine for one fitted model.

    One set of ``M`` prior draws (seeded by ``seed``) is shared by all users,
    so a user's prediction depends only on their own history.

    Parameters
    ----------
    u_hat : Hyperparameters
        Fitted population hyperparameters.
    S : int
        Skip truncation used for the history likelihood, and for the next
        cycle in ``sfree`` mode.
    M, D, seed : int
        Draw count, last day of the predictive grid, draw seed.
    """

    def __init__(
        self,
        u_hat: Hyperparameters,
        S: int = DEFAULT_S,
        M: int = DEFAULT_M,
        D: int = DEFAULT_D,
        seed: int = 0,
        sampler: str = "rqmc",
    ):
        if D < 2:
            raise DomainError("D must be >= 2")
        self.u_hat = u_hat
        self.S = S
        self.M = M
        self.D = D
        self.seed = seed
        self.draws = sample_user_params(u_hat, M, make_rng(seed, _KEY_PREDICT), sampler)
        self._components = {}

    def s_pred(self, mode: str) -> int:
        return 0 if canonical_mode(mode) == S0 else self.S

    def _component_table(self, mode: str):
        """Grid-normalized Poisson rows for every kept (draw, skip) pair.

        Rows are ordered by skip count so each skip count is a contiguous
        block.
        """
        mode = canonical_mode(mode)
        if mode in self._components:
            return self._components[mode]
        S_pred = self.s_pred(mode)
        lsp = log_skip_pmf(self.draws.pi, S_pred)  # (M, S_pred+1)
        s_idx, m_idx = np.nonzero(lsp.T > -_LOG_PRUNE)
        mu = self.draws.lam[m_idx] * (s_idx + 1.0)
        d = np.arange(self.D + 1, dtype=float)
        # built in place in one buffer; tables can hold millions of rows
        rows = np.multiply(np.log(mu)[:, None], d[None, :])
        rows -= mu[:, None]
        rows -= gammaln(d + 1.0)[None, :]
        rows -= rows.max(axis=1, keepdims=True)
        np.exp(rows, out=rows)
        rows /= rows.sum(axis=1, keepdims=True)
        bounds = np.searchsorted(s_idx, np.arange(S_pred + 2))
        table = (m_idx, lsp[m_idx, s_idx], rows, bounds)
        self._components[mode] = table
        return table

    def log_weights(self, histories: Sequence[CycleHistory]) -> np.ndarray:
        """Normalized log importance weights, shape (I, M)."""
        ll = log_likelihood_matrix(histories, self.draws.lam, self.draws.pi, self.S)
        lse = logsumexp(ll, axis=1, keepdims=True)
        bad = ~np.isfinite(lse[:, 0])
        if bad.any():
            uid = histories[int(np.flatnonzero(bad)[0])].user_id
            raise NumericalError(f"user {uid}: history incompatible with prior support")
        return ll - lse

    def _pair_weights(self, log_w_row: np.ndarray, mode: str):
        m_idx, log_skip, rows, bounds = self._component_table(mode)
        lw = log_w_row[m_idx] + log_skip
        w = np.exp(lw - lw.max())
        # negligible pairs contribute exact zeros
        w[lw < lw.max() - _LOG_PRUNE] = 0.0
        return w, rows, bounds

    def joint(self, history: CycleHistory, mode: str, log_w_row: Optional[np.ndarray] = None) -> np.ndarray:
        """Joint table over (s*, d*), shape (S_pred+1, D+1), summing to 1."""
        if log_w_row is None:
            log_w_row = self.log_weights([history])[0]
        w, rows, bounds = self._pair_weights(log_w_row, mode)
        out = np.zeros((len(bounds) - 1, self.D + 1))
        for s in range(len(bounds) - 1):
            lo, hi = bounds[s], bounds[s + 1]
            if hi > lo:
                out[s] = w[lo:hi] @ rows[lo:hi]
        return out / out.sum()

    def unconditional(self, history: CycleHistory, mode: str, log_w_row: Optional[np.ndarray] = None) -> np.ndarray:
        """p(d* | d_i, u_hat) over d* = 0..D."""
        if log_w_row is None:
            log_w_row = self.log_weights([history])[0]
        w, rows, _ = self._pair_weights(log_w_row, mode)
        pmf = w @ rows
        return pmf / pmf.sum()

    def unconditional_many(self, histories: Sequence[CycleHistory], mode: str, threads: int | None = None) -> np.ndarray:
        """Unconditional pmfs for many users, shape (I, D+1)."""
        self._component_table(mode)

        def chunk(hs):
            lw = self.log_weights(hs)
            return [self.unconditional(h, mode, lw[i]) for i, h in enumerate(hs)]

        return np.array(map_chunks(chunk, list(histories), threads)).reshape(len(histories), self.D + 1)

    def conditional(self, history: CycleHistory, mode: str, d_current: int) -> PredictiveDistribution:
        return truncate_pmf(self.unconditional(history, mode), d_current)

    def expected(self, history: CycleHistory, mode: str, d_current: int) -> float:
        return float(conditional_expectations(self.unconditional(history, mode), [d_current])[0])

    def skip_posterior(self, history: CycleHistory, d_current: int) -> PredictiveDistribution:
        """p(s* | d_i, d* > d_current, u_hat) over s* = 0..S."""
        joint = self.joint(history, SFREE)
        return skip_posterior_from_joint(joint, d_current)

    def posterior_mean_rate(self, history: CycleHistory) -> float:
        """Importance-weighted posterior mean of the user's Poisson rate."""
        w = np.exp(self.log_weights([history])[0])
        return float(w @ self.draws.lam)


def skip_posterior_from_joint(joint: np.ndarray, d_current: int) -> PredictiveDistribution:
    D = joint.shape[1] - 1
    if not 0 <= d_current < D:
        raise DomainError(f"d_current must lie in [0, {D}), got {d_current}")
    surv = joint[:, d_current + 1 :].sum(axis=1)
    total = surv.sum()
    if not total > 1e-300:
        raise NumericalError(f"conditioning event numerically impossible at d_current={d_current}")
    return PredictiveDistribution(np.arange(joint.shape[0]), surv / total)


@dataclass(frozen=True)
class PredictiveQuery:
    history: CycleHistory
    u_hat: Hyperparameters
    d_current: int = 0
    mode: str = SFREE
    M: int = DEFAULT_M
    S: int = DEFAULT_S
    D: int = DEFAULT_D
    seed: int = 0
    sampler: str = "rqmc"

    def __post_init__(self):
        canonical_mode(self.mode)
        if not 0 <= self.d_current < self.D:
            raise DomainError("d_current must satisfy 0 <= d_current < D")

    def predictor(self) -> Predictor:
        return Predictor(self.u_hat, self.S, self.M, self.D, self.seed, self.sampler)


def next_cycle_unconditional_pmf(
    history: CycleHistory,
    u_hat: Hyperparameters,
    mode: str = SFREE,
    M: int = DEFAULT_M,
    S: int = DEFAULT_S,
    D: int = DEFAULT_D,
    seed: int = 0,
    sampler: str = "rqmc",
) -> np.ndarray:
    """p(d* | d_i, u_hat) on the grid d* = 0..D."""
    return Predictor(u_hat, S, M, D, seed, sampler).unconditional(history, mode)


def next_cycle_conditional_pmf(query: PredictiveQuery) -> PredictiveDistribution:
    """p(d* | d* > d_current, d_i, u_hat) over d* = d_current+1..D."""
    return query.predictor().conditional(query.history, query.mode, query.d_current)


def expected_next_cycle(query: PredictiveQuery) -> float:
    """Conditional expectation of the next reported cycle length."""
    return query.predictor().expected(query.history, query.mode, query.d_current)


def map_next_cycle(query: PredictiveQuery) -> int:
    """Most probable next reported cycle length given d* > d_current."""
    return next_cycle_conditional_pmf(query).argmax()


def skip_posterior(query: PredictiveQuery) -> PredictiveDistribution:
    """Posterior over skipped cycles hidden in the ongoing cycle."""
    return query.predictor().skip_posterior(query.history, query.d_current)


def local_maxima(p: np.ndarray) -> List[int]:
    """Indices that are strictly higher than each existing neighbour."""
    p = np.asarray(p)
    out = []
    for k in range(len(p)):
        if p[k] <= 0:
            continue
        left = k == 0 or p[k] > p[k - 1]
        right = k == len(p) - 1 or p[k] > p[k + 1]
        if left and right:
            out.append(k)
    return out
