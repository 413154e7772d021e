import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cycleskip.evaluate import BaselineModel, ProposedModel, per_day_rmse_curve  # noqa: E402
from cycleskip.inference import FitConfig, fit  # noqa: E402
from cycleskip.model import DEFAULT_U0  # noqa: E402
from cycleskip.predict import Predictor  # noqa: E402
from cycleskip.simulate import SimulationSpec, simulate_population  # noqa: E402

# desk-scale population shared by the acceptance checks: ten training cycles
# plus one held-out cycle per user
ACCEPT_USERS = 10_000
ACCEPT_TRAIN = 10
ACCEPT_SEED = 1
ACCEPT_M_PREDICT = 1000

_acceptance_lines = []


@pytest.fixture(scope="session")
def accept_data():
    return simulate_population(SimulationSpec(DEFAULT_U0, I=ACCEPT_USERS, C=ACCEPT_TRAIN + 1, seed=ACCEPT_SEED))


@pytest.fixture(scope="session")
def accept_fit(accept_data):
    return fit(accept_data.head_cycles(ACCEPT_TRAIN).histories, FitConfig())


@pytest.fixture(scope="session")
def accept_predictor(accept_fit):
    return Predictor(accept_fit.u_hat, M=ACCEPT_M_PREDICT)


@pytest.fixture(scope="session")
def accept_curve(accept_data, accept_predictor):
    models = [ProposedModel(accept_predictor, "sfree"), ProposedModel(accept_predictor, "s0"), BaselineModel("mean")]
    return per_day_rmse_curve(accept_data, models, days=[0, 40], n_train=ACCEPT_TRAIN)


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion."""
    entry = {"name": request.node.name, "detail": ""}
    _acceptance_lines.append(entry)

    def note(detail: str) -> None:
        entry["detail"] = detail

    yield note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        for entry in _acceptance_lines:
            if entry["name"] == item.name:
                entry["passed"] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for entry in _acceptance_lines:
        verdict = "PASS" if entry.get("passed") else "FAIL"
        terminalreporter.write_line(f"{verdict}  {entry['name']}  {entry['detail']}")
