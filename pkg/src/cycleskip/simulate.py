"""Synthetic populations drawn from the full generative process."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ._parallel import map_chunks
from .dataset import Dataset
from .errors import DomainError
from .model import DEFAULT_S, DEFAULT_U0, PI_MAX, CycleHistory, Hyperparameters, UserParameters, make_rng, skip_pmf


@dataclass(frozen=True)
class SimulationSpec:
    """Population to simulate.

    ``fixed_pi`` overrides the Beta prior draw for every user; ``0.0``
    produces a population that never skips.
    """

    u_true: Hyperparameters = DEFAULT_U0
    I: int = 10_000
    C: int = 10
    S: int = DEFAULT_S
    seed: int = 0
    fixed_pi: Optional[float] = None

    def __post_init__(self):
        if self.I < 1 or self.C < 1:
            raise DomainError("I and C must be >= 1")
        if self.S < 0:
            raise DomainError("S must be >= 0")
        if self.fixed_pi is not None and not (0.0 <= self.fixed_pi < 1.0):
            raise DomainError("fixed_pi must lie in [0, 1)")


def simulate_user(spec: SimulationSpec, index: int) -> Tuple[CycleHistory, UserParameters, int]:
    """One user's history, true parameters and zero-length redraw count."""
    rng = make_rng(spec.seed, index)
    u = spec.u_true
    lam = rng.gamma(u.kappa, 1.0 / u.gamma)
    if spec.fixed_pi is None:
        pi = min(rng.beta(u.alpha, u.beta), PI_MAX)
    else:
        pi = spec.fixed_pi
    cdf = np.cumsum(skip_pmf(pi, spec.S))
    skips = np.minimum(np.searchsorted(cdf, rng.random(spec.C), side="right"), spec.S)
    cycles = rng.poisson(lam * (skips + 1))
    redraws = 0
    for c in np.flatnonzero(cycles == 0):
        while cycles[c] == 0:
            cycles[c] = rng.poisson(lam * (skips[c] + 1))
            redraws += 1
    history = CycleHistory(str(index), tuple(int(x) for x in cycles), tuple(int(s) for s in skips))
    return history, UserParameters(float(lam), float(pi)), redraws


def simulate_population(spec: SimulationSpec, threads: int | None = None) -> Dataset:
    """Simulate ``spec.I`` users with ``spec.C`` observed cycles each.

    Every user has its own random stream derived from (seed, user index),
    so the output does not depend on thread count or scheduling.
    """

    def chunk(indices):
        return [simulate_user(spec, int(i)) for i in indices]

    results = map_chunks(chunk, range(spec.I), threads)
    histories = [r[0] for r in results]
    params = [r[1] for r in results]
    redraws = sum(r[2] for r in results)
    return Dataset(histories, params, redraws)


def split_cohorts_by_skip(dataset: Dataset, n_cycles: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Partition users into (ever skipped, never skipped).

    Only the first ``n_cycles`` cycles (all when ``None``) are inspected.
    """
    if not dataset.has_true_skips:
        raise DomainError("dataset has no ground-truth skip counts")
    ever, never = [], []
    for i, h in enumerate(dataset.histories):
        skips = h.true_skips if n_cycles is None else h.true_skips[:n_cycles]
        (ever if any(s >= 1 for s in skips) else never).append(i)
    return dataset.subset(ever), dataset.subset(never)
