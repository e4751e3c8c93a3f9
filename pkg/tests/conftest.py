"""Shared hexagon-bundle fixtures (trained once per test session)."""
import numpy as np
import pytest

from phasefield_rb.presets import build_problem, preset_config, train_bundle


def _small_hex_points():
    rng = np.random.default_rng(5)
    pts = [np.zeros(6), np.full(6, 0.5), np.ones(6), np.full(6, 0.3)]
    pts += list(rng.random((8, 6)))
    return [list(map(float, p)) for p in pts]


@pytest.fixture(scope="session")
def hex_small():
    """Coarse hexagon ROM that is exact at its 12 training points (incl. uniform damage 0.5)."""
    plan = {"kind": "explicit", "points": _small_hex_points()}
    cfg = preset_config("hexagon", solution_plan=plan, field_plan=plan, r_max=200)
    problem = build_problem(cfg)
    res = train_bundle(problem)
    return problem, res


@pytest.fixture(scope="session")
def hex_desk():
    """The desk-scale hexagon preset (about a minute of offline work)."""
    problem = build_problem(preset_config("hexagon"))
    return problem, train_bundle(problem)


# -- acceptance report ----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance_report(request):
    """``report(n, passed, detail)`` records one line for the end-of-run acceptance summary."""
    def report(n: int, passed: bool, detail: str) -> None:
        request.config.stash[_ACCEPTANCE][n] = (bool(passed), detail)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
