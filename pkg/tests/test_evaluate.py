import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycleskip.errors import DomainError
from cycleskip.evaluate import (
    BaselineModel,
    ProposedModel,
    absolute_errors,
    baseline_predict,
    cld_bucket,
    median_cld,
    per_day_rmse_curve,
    rmse,
    stratify_by_cld,
    write_curve_csv,
    write_strata_csv,
    write_user_errors_csv,
)
from cycleskip.model import DEFAULT_U0, CycleHistory, Hyperparameters
from cycleskip.predict import Predictor
from cycleskip.simulate import SimulationSpec, simulate_population


class OracleModel:
    """Predicts the held-out cycle exactly; looks it up by user id."""

    name = "oracle"

    def __init__(self, truth):
        self.truth = truth

    def predict(self, histories, days, threads=None):
        return np.array([[self.truth[h.user_id]] * len(days) for h in histories], dtype=float)


# --- metrics --------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([30, 40], [30, 40]) == 0.0
    assert rmse([30], [33]) == 3.0
    assert rmse([30, 40], [33, 36]) == pytest.approx(math.sqrt(12.5), rel=1e-15)


def test_rmse_errors():
    with pytest.raises(DomainError):
        rmse([1, 2], [1])
    with pytest.raises(DomainError):
        rmse([], [])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_rmse_properties(pairs, rnd):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    value = rmse(a, b)
    assert value >= 0
    assert rmse(a, a) == 0
    order = list(range(len(a)))
    rnd.shuffle(order)
    assert rmse([a[i] for i in order], [b[i] for i in order]) == pytest.approx(value, rel=1e-12)
    assert value >= float(np.mean(absolute_errors(a, b))) - 1e-9


def test_median_cld_examples():
    assert median_cld([30, 40, 25, 30]) == 10
    assert median_cld([29, 29, 29]) == 0
    assert median_cld([28, 30]) == 2
    with pytest.raises(DomainError):
        median_cld([30])


def test_baseline_examples():
    h = CycleHistory("a", (30, 40, 25, 30))
    assert baseline_predict(h, "mean") == 31.25
    assert baseline_predict(h, "median") == 30
    one = CycleHistory("b", (29,))
    assert baseline_predict(one, "mean") == baseline_predict(one, "median") == 29
    with pytest.raises(DomainError):
        baseline_predict(CycleHistory("c", ()))
    with pytest.raises(DomainError):
        baseline_predict(h, "mode")


# --- curve protocol -------------------------------------------------------------


@pytest.fixture(scope="module")
def sim():
    return simulate_population(SimulationSpec(DEFAULT_U0, I=400, C=11, seed=31))


def test_oracle_model_has_zero_rmse(sim):
    truth = {h.user_id: h.cycles[10] for h in sim}
    report = per_day_rmse_curve(sim, [OracleModel(truth)], days=[0, 20, 40], n_train=10)
    assert all(r.rmse == 0.0 for r in report.rows)


@pytest.mark.parametrize("eligibility", ["conditional", "all"])
def test_bookkeeping_sums_to_users(eligibility):
    data = simulate_population(SimulationSpec(DEFAULT_U0, I=200, C=11, seed=5))
    data.histories[:10] = [h.head(8) for h in data.histories[:10]]
    report = per_day_rmse_curve(data, [BaselineModel("mean")], days=range(0, 60, 5), n_train=10, eligibility=eligibility)
    for r in report.rows:
        assert r.n_eligible + r.n_excluded_condition + r.n_excluded_short == 200
        assert r.n_excluded_short == 10


def test_conditional_eligibility_filters_by_held_out(sim):
    report = per_day_rmse_curve(sim, [BaselineModel("mean")], days=[35], n_train=10)
    assert report.rows[0].n_eligible == int(np.sum(report.actual > 35))


def test_baselines_flat_under_all_users(sim):
    report = per_day_rmse_curve(sim, [BaselineModel("mean"), BaselineModel("median")], days=[0, 10, 30, 50], n_train=10, eligibility="all")
    for name in ("mean", "median"):
        values = [report.rmse_at(name, d) for d in (0, 10, 30, 50)]
        assert len(set(values)) == 1
        preds = report.predictions[name]
        assert np.all(preds == preds[:, :1])


def test_proposed_day_zero_matches_single_shot(sim):
    pred = Predictor(DEFAULT_U0, M=500, seed=2)
    report = per_day_rmse_curve(sim, [ProposedModel(pred, "sfree")], days=[0, 30], n_train=10, eligibility="all")
    train = [h.head(10) for h in sim]
    single = np.array([pred.expected(h, "sfree", 0) for h in train])
    np.testing.assert_allclose(report.predictions["proposed_sfree"][:, 0], single, rtol=1e-12)
    assert report.rmse_at("proposed_sfree", 0) == pytest.approx(rmse(report.actual, single), rel=1e-12)


def test_bad_eligibility(sim):
    with pytest.raises(DomainError):
        per_day_rmse_curve(sim, [BaselineModel()], days=[0], eligibility="some")


# --- stratification -------------------------------------------------------------


def test_cld_buckets():
    assert [cld_bucket(v) for v in (0, 0.5, 1.0, 9.5, 10, 37, float("nan"))] == ["0", "0", "1", "9", "10+", "10+", "na"]


def test_perfect_predictions_zero_in_every_bucket():
    clds = [0, 1, 1, 4, 12]
    rows = stratify_by_cld(clds, [0.0] * 5)
    assert [r.bucket for r in rows] == ["0", "1", "4", "10+"]
    assert all(r.median_abs_error == 0 and r.rmse == 0 for r in rows)


def test_stratify_values():
    rows = stratify_by_cld([2, 2, 2, 3], [1.0, 2.0, 30.0, 4.0])
    assert rows[0].bucket == "2" and rows[0].n_users == 3
    assert rows[0].median_abs_error == 2.0
    assert rows[0].rmse == pytest.approx(math.sqrt((1 + 4 + 900) / 3))


def test_outliers_make_median_error_far_below_rmse():
    data = simulate_population(SimulationSpec(DEFAULT_U0, I=3000, C=11, seed=8))
    report = per_day_rmse_curve(data, [BaselineModel("median")], days=[0], n_train=10)
    rows = {r.bucket: r for r in stratify_by_cld(report.median_clds, report.errors_at("median", 0))}
    # skip outliers inflate RMSE but not the median error in low-variability buckets
    assert rows["2"].median_abs_error < 0.5 * rows["2"].rmse


def test_median_error_grows_with_variability():
    # rates spread widely across users and Poisson noise grows with the rate,
    # so the median CLD orders users by variability
    u = Hyperparameters(4.0, 0.1, 2.0, 20.0)
    data = simulate_population(SimulationSpec(u, I=30_000, C=11, seed=9, fixed_pi=0.0))
    report = per_day_rmse_curve(data, [BaselineModel("mean")], days=[0], n_train=10)
    rows = [r for r in stratify_by_cld(report.median_clds, report.errors_at("mean", 0)) if r.n_users >= 300]
    mae = [r.median_abs_error for r in rows]
    assert len(mae) >= 8
    # medians of |mean of 10 integers - integer| move in 0.1-day steps
    assert all(b >= a - 0.2 for a, b in zip(mae, mae[1:]))
    assert mae[-1] > mae[0] + 1.5


# --- writers --------------------------------------------------------------------


def test_writers(tmp_path, sim):
    report = per_day_rmse_curve(sim, [BaselineModel("mean")], days=[0, 10], n_train=10)
    write_curve_csv(report, tmp_path / "c.csv")
    write_user_errors_csv(report, tmp_path / "u.csv", 0)
    write_strata_csv(report, tmp_path / "s.csv", 0)
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert [r["d_current"] for r in rows] == ["0", "10"]
    assert float(rows[0]["rmse"]) == pytest.approx(report.rmse_at("mean", 0), rel=1e-9)
    users = list(csv.DictReader(open(tmp_path / "u.csv")))
    assert len(users) == 400
    assert set(users[0]) == {"user_id", "model", "d_current", "actual", "predicted", "abs_error", "median_cld"}
    strata = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert sum(int(r["n_users"]) for r in strata) == 400
