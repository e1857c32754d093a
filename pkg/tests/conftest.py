import numpy as np
import pytest

from panellasso.panel_model import PanelDataset, TrueModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_panel(rng, n=5, t=6, p=4, noise=1.0, s1=2, s2=2):
    x = rng.standard_normal((n * t, p))
    beta = np.zeros(p)
    beta[:s1] = rng.choice([-1.5, 2.0], s1)
    c = np.zeros(n)
    c[:s2] = rng.choice([-1.0, 1.5], s2)
    y = x @ beta + np.repeat(c, t) + noise * rng.standard_normal(n * t)
    return PanelDataset(n, t, y, x), TrueModel(beta, c)


@pytest.fixture
def small_panel(rng):
    return make_panel(rng)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(request):
    """Record a one-line PASS/FAIL verdict and echo it past output capture."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
