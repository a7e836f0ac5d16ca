import warnings

import numpy as np
import pytest

from kercop import bench, model
from kercop.estimators import TLLConvergenceWarning
from kercop.numcore import ranks_to_pseudo


@pytest.fixture(autouse=True)
def _quiet_tll():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TLLConvergenceWarning)
        yield


@pytest.fixture(scope="session")
def indep_data():
    return np.random.default_rng(2024).random((2000, 2))


@pytest.fixture(scope="session")
def gauss_data():
    """Pseudo-observations from a Gaussian copula with tau = 0.5."""
    cop = bench.tau_to_param("gaussian", 0.5)
    return ranks_to_pseudo(cop.sample(1000, seed=11))


class _FitCache:
    def __init__(self, datasets):
        self.datasets = datasets
        self.cache = {}

    def __call__(self, name, method, **kw):
        key = (name, method, tuple(sorted(kw.items())))
        if key not in self.cache:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TLLConvergenceWarning)
                self.cache[key] = model.fit(self.datasets[name], method, **kw)
        return self.cache[key]


@pytest.fixture(scope="session")
def datasets(indep_data, gauss_data):
    return {"indep": indep_data, "gauss": gauss_data}


@pytest.fixture(scope="session")
def fitted(indep_data, gauss_data):
    """Session-wide memoized fits: ``fitted("indep" | "gauss", method)``."""
    return _FitCache({"indep": indep_data, "gauss": gauss_data})


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, repeated at the end
# of the terminal summary so it is visible without -s

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    def report(number, passed, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
