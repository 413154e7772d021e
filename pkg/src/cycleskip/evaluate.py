"""Metrics, baselines and the per-day evaluation protocol."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np

from .dataset import Dataset
from .errors import DomainError
from .model import CycleHistory
from .predict import Predictor, canonical_mode, conditional_expectations

CONDITIONAL = "conditional"  # only users whose held-out cycle exceeds d_current
ALL = "all"  # every user with a held-out cycle, on every day
ELIGIBILITY = (CONDITIONAL, ALL)


def rmse(actual: Sequence[float], predicted: Sequence[float]) -> float:
    """Root mean squared error."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise DomainError(f"length mismatch: {actual.shape} vs {predicted.shape}")
    if actual.size == 0:
        raise DomainError("rmse of zero points")
    err = actual - predicted
    return math.sqrt(math.fsum(err * err) / err.size)


def absolute_errors(actual: Sequence[float], predicted: Sequence[float]) -> np.ndarray:
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise DomainError(f"length mismatch: {actual.shape} vs {predicted.shape}")
    return np.abs(actual - predicted)


def median_cld(history: CycleHistory | Sequence[int]) -> float:
    """Median absolute difference between consecutive cycle lengths."""
    cycles = history.cycles if isinstance(history, CycleHistory) else tuple(history)
    if len(cycles) < 2:
        raise DomainError("median CLD needs at least 2 cycles")
    return float(np.median(np.abs(np.diff(np.asarray(cycles, dtype=float)))))


def baseline_predict(history: CycleHistory, statistic: str = "mean") -> float:
    """Mean or median of the user's observed cycles."""
    if len(history) == 0:
        raise DomainError("history is empty")
    cycles = np.asarray(history.cycles, dtype=float)
    if statistic == "mean":
        return float(math.fsum(cycles) / cycles.size)
    if statistic == "median":
        return float(np.median(cycles))
    raise DomainError(f"unknown statistic {statistic!r}")


class PointModel(Protocol):
    name: str

    def predict(self, histories: Sequence[CycleHistory], days: Sequence[int], threads: int | None = None) -> np.ndarray:
        """Point predictions, shape (len(histories), len(days))."""


@dataclass
class BaselineModel:
    statistic: str = "mean"

    @property
    def name(self) -> str:
        return self.statistic

    def predict(self, histories, days, threads=None):
        values = np.array([baseline_predict(h, self.statistic) for h in histories])
        return np.repeat(values[:, None], len(days), axis=1)


@dataclass
class ProposedModel:
    """Conditional posterior-predictive expectation, re-evaluated each day."""

    predictor: Predictor
    mode: str = "sfree"
    label: Optional[str] = None

    @property
    def name(self) -> str:
        return self.label or f"proposed_{canonical_mode(self.mode)}"

    def predict(self, histories, days, threads=None):
        pmfs = self.predictor.unconditional_many(histories, self.mode, threads)
        return np.array([conditional_expectations(p, days) for p in pmfs]).reshape(len(histories), len(days))


@dataclass
class CurveRow:
    model: str
    d_current: int
    rmse: float
    n_eligible: int
    n_excluded_condition: int
    n_excluded_short: int


@dataclass
class EvaluationReport:
    rows: List[CurveRow]
    user_ids: List[str]
    actual: np.ndarray  # held-out cycle per evaluable user
    predictions: Dict[str, np.ndarray]  # model -> (users, days)
    days: List[int]
    n_excluded_short: int
    median_clds: np.ndarray = field(default_factory=lambda: np.empty(0))

    def rmse_at(self, model: str, d_current: int) -> float:
        for r in self.rows:
            if r.model == model and r.d_current == d_current:
                return r.rmse
        raise KeyError((model, d_current))

    def errors_at(self, model: str, d_current: int) -> np.ndarray:
        j = self.days.index(d_current)
        return absolute_errors(self.actual, self.predictions[model][:, j])


def per_day_rmse_curve(
    dataset: Dataset | Sequence[CycleHistory],
    models: Sequence[PointModel],
    days: Sequence[int] = range(41),
    n_train: int = 10,
    eligibility: str = CONDITIONAL,
    threads: int | None = None,
) -> EvaluationReport:
    """RMSE of each model's point prediction for every current day.

    Each user's first ``n_train`` cycles are the input and cycle
    ``n_train + 1`` is the target. With ``eligibility="conditional"`` the
    users scored on day d are those whose held-out cycle is longer than d;
    with ``"all"`` every user is scored on every day. Users with too few
    cycles are excluded and counted.
    """
    if eligibility not in ELIGIBILITY:
        raise DomainError(f"eligibility must be one of {ELIGIBILITY}")
    histories = dataset.histories if isinstance(dataset, Dataset) else list(dataset)
    days = [int(d) for d in days]
    train, actual, ids = [], [], []
    for h in histories:
        if len(h) >= n_train + 1:
            train.append(h.head(n_train))
            actual.append(h.cycles[n_train])
            ids.append(h.user_id)
    n_short = len(histories) - len(train)
    actual_arr = np.asarray(actual, dtype=float)
    preds = {m.name: np.asarray(m.predict(train, days, threads), dtype=float) for m in models}
    rows = []
    for m in models:
        p = preds[m.name]
        for j, d in enumerate(days):
            mask = actual_arr > d if eligibility == CONDITIONAL else np.ones(actual_arr.size, bool)
            n_elig = int(mask.sum())
            value = rmse(actual_arr[mask], p[mask, j]) if n_elig else math.nan
            rows.append(CurveRow(m.name, d, value, n_elig, actual_arr.size - n_elig, n_short))
    clds = np.array([median_cld(h) if len(h) >= 2 else math.nan for h in train])
    return EvaluationReport(rows, ids, actual_arr, preds, days, n_short, clds)


def cld_bucket(value: float, top: int = 10) -> str:
    if math.isnan(value):
        return "na"
    b = int(math.floor(value))
    return f"{top}+" if b >= top else str(b)


@dataclass
class StratumRow:
    bucket: str
    n_users: int
    median_abs_error: float
    rmse: float


def stratify_by_cld(clds: Sequence[float], errors: Sequence[float], top: int = 10) -> List[StratumRow]:
    """Median absolute error and RMSE per integer median-CLD bucket.

    Buckets are 0..top-1 plus a ``top+`` overflow bucket; half-integer
    medians fall into the bucket of their floor.
    """
    clds = np.asarray(clds, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if clds.shape != errors.shape:
        raise DomainError("clds and errors differ in length")
    labels = [cld_bucket(c, top) for c in clds]
    order = [str(b) for b in range(top)] + [f"{top}+", "na"]
    out = []
    for b in order:
        idx = [i for i, lab in enumerate(labels) if lab == b]
        if not idx:
            continue
        e = errors[idx]
        out.append(StratumRow(b, len(idx), float(np.median(e)), math.sqrt(math.fsum(e * e) / e.size)))
    return out


# ---------------------------------------------------------------------------
# CSV output

_FLOAT = "{:.10g}"


def fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else _FLOAT.format(x)


def write_curve_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "d_current", "rmse", "n_eligible", "n_excluded_condition", "n_excluded_short"])
        for r in report.rows:
            w.writerow([r.model, r.d_current, fmt(r.rmse), r.n_eligible, r.n_excluded_condition, r.n_excluded_short])


def write_user_errors_csv(report: EvaluationReport, path, d_current: int = 0) -> None:
    """Per-user long format: one row per user and model at ``d_current``."""
    j = report.days.index(d_current)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "model", "d_current", "actual", "predicted", "abs_error", "median_cld"])
        for model, p in report.predictions.items():
            for i, uid in enumerate(report.user_ids):
                pred = p[i, j]
                w.writerow([uid, model, d_current, int(report.actual[i]), fmt(pred), fmt(abs(report.actual[i] - pred)), fmt(report.median_clds[i])])


def write_strata_csv(report: EvaluationReport, path, d_current: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "cld_bucket", "n_users", "median_abs_error", "rmse"])
        for model in report.predictions:
            for s in stratify_by_cld(report.median_clds, report.errors_at(model, d_current)):
                w.writerow([model, s.bucket, s.n_users, fmt(s.median_abs_error), fmt(s.rmse)])
