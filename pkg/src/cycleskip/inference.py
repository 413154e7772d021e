"""Empirical-Bayes fitting of the population hyperparameters.

The marginal likelihood of each user's history is estimated by averaging the
skip-marginalized likelihood over draws from the population prior. Gradients
use the self-normalized score-function form of Fisher's identity, and the
optimizer is Adam in log-hyperparameter space.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from ._parallel import map_chunks
from .errors import DomainError, NumericalError
from .model import (
    DEFAULT_M,
    DEFAULT_S,
    DEFAULT_U0,
    CycleHistory,
    Hyperparameters,
    ParameterDraws,
    _log_gamma_density,
    log_likelihood_matrix,
    log_prior_score,
    make_rng,
    sample_user_params,
)

logger = logging.getLogger(__name__)

# stream keys for make_rng
_KEY_SHUFFLE = 1
_KEY_BATCH = 2
_KEY_EVAL = 3


class MCEstimate(NamedTuple):
    log_marginal: float
    stderr: float
    ess: float


def _log_mean_exp(row: np.ndarray) -> float:
    return float(logsumexp(row) - math.log(row.size))


def _stderr_and_ess(row: np.ndarray) -> tuple[float, float]:
    """Delta-method standard error of log-mean-exp and the effective sample size."""
    lse = logsumexp(row)
    if not np.isfinite(lse):
        return math.inf, 0.0
    w = np.exp(row - lse)
    sum_w2 = float(np.dot(w, w))
    M = row.size
    rel_var = max(M * sum_w2 - 1.0, 0.0)
    return math.sqrt(rel_var / M), 1.0 / sum_w2


def mc_log_marginal_estimate(
    history: CycleHistory, u: Hyperparameters, M: int, S: int, rng: np.random.Generator, sampler: str = "rqmc"
) -> MCEstimate:
    """MC estimate of log p(d_i | u) with its standard error and ESS.

    The standard error is the delta-method value for independent draws; for
    the default RQMC point sets it is a conservative bound.
    """
    if len(history) == 0:
        raise DomainError("history is empty")
    draws = sample_user_params(u, M, rng, sampler)
    row = log_likelihood_matrix([history], draws.lam, draws.pi, S)[0]
    value = _log_mean_exp(row)
    if not math.isfinite(value):
        warnings.warn(f"user {history.user_id}: all {M} draws have zero likelihood", RuntimeWarning)
        return MCEstimate(-math.inf, math.inf, 0.0)
    stderr, ess = _stderr_and_ess(row)
    return MCEstimate(value, stderr, ess)


def mc_user_log_marginal(
    history: CycleHistory, u: Hyperparameters, M: int, S: int, rng: np.random.Generator, sampler: str = "rqmc"
) -> float:
    """log[(1/M) sum_m p(d_i | theta_m)] with theta_m drawn from the prior."""
    return mc_log_marginal_estimate(history, u, M, S, rng, sampler).log_marginal


# ---------------------------------------------------------------------------
# Quadrature oracle


@dataclass(frozen=True)
class GridSpec:
    """Composite Gauss-Legendre tensor grid over (lam, pi).

    ``pi`` ranges over [0, pi_hi]; ``pi_hi=0`` puts all mass on pi = 0.
    Near 0 the substitution pi = m * t**p with p = ceil(alpha)/alpha turns
    the Beta density's pi**(alpha-1) factor into an integer power of t.
    When ``pi_hi == 1`` the range is split at m = 1/2 and the upper piece
    uses the mirrored substitution 1 - pi = (1 - m) * v**q with
    q = ceil(beta)/beta.
    """

    lam_lo: float
    lam_hi: float
    pi_hi: float = 1.0
    lam_panels: int = 16
    pi_panels: int = 16
    order: int = 16

    def refined(self) -> "GridSpec":
        return GridSpec(self.lam_lo, self.lam_hi, self.pi_hi, 2 * self.lam_panels, 2 * self.pi_panels, self.order)


def default_grid(u: Hyperparameters, tail: float = 1e-15, **kwargs) -> GridSpec:
    """Grid covering the Gamma prior on lam between its ``tail`` quantiles."""
    dist = stats.gamma(a=u.kappa, scale=1.0 / u.gamma)
    lo = float(dist.ppf(tail))
    hi = float(dist.isf(tail))
    return GridSpec(max(lo, 1e-12), hi, **kwargs)


def _gauss_legendre(lo: float, hi: float, panels: int, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _pi_nodes(u: Hyperparameters, grid: GridSpec):
    """Nodes in pi and log of (weight * jacobian * Beta density)."""
    if grid.pi_hi == 0.0:
        return np.zeros(1), np.zeros(1)
    norm = gammaln(u.alpha + u.beta) - gammaln(u.alpha) - gammaln(u.beta)
    split = grid.pi_hi == 1.0
    m = 0.5 if split else grid.pi_hi
    # lower piece; log pi comes from log t since pi underflows for large p
    p = max(1.0, math.ceil(u.alpha)) / u.alpha
    t, w_t = _gauss_legendre(0.0, 1.0, grid.pi_panels, grid.order)
    log_pi = math.log(m) + p * np.log(t)
    pi_lo = np.exp(log_pi)
    log_lo = np.log(w_t) + math.log(m * p) + (p - 1.0) * np.log(t) + (u.alpha - 1.0) * log_pi + (u.beta - 1.0) * np.log1p(-pi_lo)
    if not split:
        return pi_lo, norm + log_lo
    q = max(1.0, math.ceil(u.beta)) / u.beta
    v, w_v = _gauss_legendre(0.0, 1.0, grid.pi_panels, grid.order)
    log_rest = math.log(1.0 - m) + q * np.log(v)  # log(1 - pi)
    pi_up = -np.expm1(log_rest)
    log_up = np.log(w_v) + math.log((1.0 - m) * q) + (q - 1.0) * np.log(v) + (u.alpha - 1.0) * np.log(pi_up) + (u.beta - 1.0) * log_rest
    # the likelihood needs pi < 1; it is continuous as pi -> 1
    pi = np.minimum(np.concatenate([pi_lo, pi_up]), 1.0 - 1e-15)
    return pi, norm + np.concatenate([log_lo, log_up])


def _quadrature_once(history: CycleHistory, u: Hyperparameters, S: int, grid: GridSpec) -> tuple[float, float]:
    lam, w_lam = _gauss_legendre(grid.lam_lo, grid.lam_hi, grid.lam_panels, grid.order)
    log_a = np.log(w_lam) + _log_gamma_density(lam, u.kappa, u.gamma)  # (L,)
    pi, log_b = _pi_nodes(u, grid)  # (P,)
    lam_grid = np.repeat(lam, pi.size)
    pi_grid = np.tile(pi, lam.size)
    ll = log_likelihood_matrix([history], lam_grid, pi_grid, S)[0].reshape(lam.size, pi.size)
    integrand = ll + log_a[:, None] + log_b[None, :]
    total = float(logsumexp(integrand))
    # mass at the outermost lam nodes relative to the total
    edge = float(np.logaddexp(logsumexp(integrand[0]), logsumexp(integrand[-1])))
    return total, edge - total


def quadrature_log_marginal(
    history: CycleHistory,
    u: Hyperparameters,
    S: int,
    grid: Optional[GridSpec] = None,
    tol: float = 1e-6,
) -> float:
    """Deterministic 2-D quadrature of log p(d_i | u).

    The integral is evaluated on ``grid`` and on a grid with twice as many
    panels along each axis. The finer value is returned.

    Raises
    ------
    NumericalError
        If the two values differ by more than ``tol`` or the lam range
        clips non-negligible posterior mass.
    """
    if len(history) == 0:
        raise DomainError("history is empty")
    grid = grid or default_grid(u)
    coarse, _ = _quadrature_once(history, u, S, grid)
    fine, edge = _quadrature_once(history, u, S, grid.refined())
    if edge > math.log(1e-12):
        raise NumericalError(
            f"lam range [{grid.lam_lo:.4g}, {grid.lam_hi:.4g}] truncates posterior mass "
            f"(edge fraction {math.exp(edge):.3g}); widen the grid"
        )
    if not abs(fine - coarse) < tol:
        raise NumericalError(
            f"quadrature not converged: refinement changed log-marginal by {abs(fine - coarse):.3g} "
            f"(tolerance {tol:g}) on grid {grid}"
        )
    return fine


def quadrature_log_marginal_gradient(
    history: CycleHistory, u: Hyperparameters, S: int, grid: Optional[GridSpec] = None, step: float = 1e-4
) -> np.ndarray:
    """Central finite differences of the quadrature log-marginal in log-u space.

    The grid is fixed at the one chosen for ``u`` so every evaluation shares
    the same nodes.
    """
    grid = grid or default_grid(u)
    base = u.log_array()
    grad = np.empty(4)
    for k in range(4):
        hi = base.copy()
        lo = base.copy()
        hi[k] += step
        lo[k] -= step
        f_hi = quadrature_log_marginal(history, Hyperparameters.from_log_array(hi), S, grid)
        f_lo = quadrature_log_marginal(history, Hyperparameters.from_log_array(lo), S, grid)
        grad[k] = (f_hi - f_lo) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# Gradient estimator


class GradientEstimate(NamedTuple):
    grad: np.ndarray  # gradient of the mean NLL w.r.t. log u
    nll: float  # mean MC NLL of the batch
    ess: np.ndarray  # per-user effective sample size
    degenerate: np.ndarray  # per-user flag, ESS < 2


def _per_user_terms(ll: np.ndarray, scores: np.ndarray):
    """Log-marginal, score and ESS per user from the (I, M) log-likelihood."""
    M = ll.shape[1]
    lse = logsumexp(ll, axis=1)
    log_marg = lse - math.log(M)
    grads = np.empty((ll.shape[0], scores.shape[1]))
    ess = np.empty(ll.shape[0])
    for i in range(ll.shape[0]):
        if not np.isfinite(lse[i]):
            grads[i] = np.nan
            ess[i] = 0.0
            continue
        w = np.exp(ll[i] - lse[i])
        grads[i] = w @ scores
        ess[i] = 1.0 / float(w @ w)
    return log_marg, grads, ess


def nll_gradient_from_draws(batch: Sequence[CycleHistory], u: Hyperparameters, draws: ParameterDraws, S: int) -> GradientEstimate:
    ll = log_likelihood_matrix(batch, draws.lam, draws.pi, S)
    scores = log_prior_score(draws.lam, draws.pi, u)
    log_marg, grads, ess = _per_user_terms(ll, scores)
    degenerate = ess < 2.0
    if degenerate.any():
        ids = [batch[i].user_id for i in np.flatnonzero(degenerate)[:5]]
        logger.debug("weight degeneracy (ESS < 2) for %d users, e.g. %s", int(degenerate.sum()), ids)
    n = len(batch)
    grad = -np.array([math.fsum(grads[:, k]) for k in range(grads.shape[1])]) / n
    nll = -math.fsum(log_marg) / n
    return GradientEstimate(grad, nll, ess, degenerate)


def nll_gradient(
    batch: Sequence[CycleHistory],
    u: Hyperparameters,
    M: int,
    S: int,
    rng: np.random.Generator,
    sampler: str = "rqmc",
) -> GradientEstimate:
    """Score-function estimate of the batch-mean NLL gradient in log-u space.

    One set of ``M`` prior draws is shared by every user in the batch. For
    each user the draws are weighted by their normalized likelihood and the
    prior score is averaged under those weights.
    """
    if len(batch) == 0:
        raise DomainError("batch is empty")
    draws = sample_user_params(u, M, rng, sampler)
    return nll_gradient_from_draws(batch, u, draws, S)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient {grad}; step rejected")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = np.asarray(params, dtype=float) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class FitConfig:
    init_u: Hyperparameters = DEFAULT_U0
    S: int = DEFAULT_S
    M: int = DEFAULT_M
    learning_rate: float = 0.01
    batch_size: int = 100
    max_epochs: int = 1000
    eps_loss: float = 1e-3
    seed: int = 0
    sampler: str = "rqmc"

    def __post_init__(self):
        if self.S < 0 or self.M < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise DomainError("S >= 0, M >= 1, batch_size >= 1 and max_epochs >= 1 required")
        if not (self.learning_rate > 0 and self.eps_loss > 0):
            raise DomainError("learning_rate and eps_loss must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init_u"] = self.init_u.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "init_u" in d and isinstance(d["init_u"], dict):
            d["init_u"] = Hyperparameters(**d["init_u"])
        return cls(**d)


@dataclass
class FitResult:
    u_hat: Hyperparameters
    trace: List[float]
    epochs_run: int
    converged: bool
    initial_nll: float = math.nan
    message: str = ""
    config: Optional[FitConfig] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = self.u_hat.to_dict()
        out.update(
            trace=list(self.trace),
            epochs_run=self.epochs_run,
            converged=self.converged,
            initial_nll=self.initial_nll,
            message=self.message,
        )
        if self.config is not None:
            out["config_echo"] = self.config.to_dict()
        return out


def mean_nll(
    histories: Sequence[CycleHistory], u: Hyperparameters, draws: ParameterDraws, S: int, threads: int | None = None
) -> float:
    """Mean MC negative log marginal likelihood over users for fixed draws."""

    def chunk(hs):
        ll = log_likelihood_matrix(hs, draws.lam, draws.pi, S)
        return list(logsumexp(ll, axis=1) - math.log(len(draws)))

    log_marg = map_chunks(chunk, list(histories), threads)
    return -math.fsum(log_marg) / len(histories)


def fit(
    histories: Sequence[CycleHistory],
    config: FitConfig = FitConfig(),
    threads: int | None = None,
) -> FitResult:
    """Type-II maximum likelihood for the hyperparameters.

    Each epoch visits shuffled minibatches with fresh prior draws per batch.
    After every epoch the full-data mean NLL is evaluated with one fixed set
    of uniforms (common random numbers across epochs), and training stops
    once its relative change drops below ``config.eps_loss``.
    """
    histories = list(histories)
    n = len(histories)
    if n == 0:
        raise DomainError("dataset is empty")
    if any(len(h) == 0 for h in histories):
        raise DomainError("every history needs at least one cycle")
    if config.batch_size > n:
        raise DomainError(f"batch_size {config.batch_size} exceeds dataset size {n}")

    def eval_nll(u: Hyperparameters) -> float:
        draws = sample_user_params(u, config.M, make_rng(config.seed, _KEY_EVAL), config.sampler)
        return mean_nll(histories, u, draws, config.S, threads)

    params = config.init_u.log_array()
    u = config.init_u
    state = AdamState.zeros(4)
    prev = eval_nll(u)
    initial = prev
    if not math.isfinite(prev):
        return FitResult(u, [], 0, False, prev, "initial NLL is not finite", config)
    trace: List[float] = []
    converged = False
    message = ""
    last_good = u
    for epoch in range(config.max_epochs):
        order = make_rng(config.seed, _KEY_SHUFFLE, epoch).permutation(n)
        try:
            for b, start in enumerate(range(0, n, config.batch_size)):
                batch = [histories[i] for i in order[start : start + config.batch_size]]
                est = nll_gradient(batch, u, config.M, config.S, make_rng(config.seed, _KEY_BATCH, epoch, b), config.sampler)
                params, state = adam_step(params, est.grad, state, lr=config.learning_rate)
                u = Hyperparameters.from_log_array(params)
        except (NumericalError, DomainError) as exc:
            message = f"aborted in epoch {epoch + 1}: {exc}"
            logger.warning(message)
            u = last_good
            break
        current = eval_nll(u)
        if not math.isfinite(current):
            message = f"NLL became non-finite in epoch {epoch + 1}"
            logger.warning(message)
            u = last_good
            break
        last_good = u
        trace.append(current)
        logger.info("epoch %d: mean NLL %.6f u=%s", epoch + 1, current, u)
        if abs(current - prev) / abs(prev) < config.eps_loss:
            converged = True
            break
        prev = current
    return FitResult(u, trace, len(trace), converged, initial, message, config)
