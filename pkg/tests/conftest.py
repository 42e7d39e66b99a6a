import numpy as np
import pytest

from rctselect.corpus import Corpus, Rct, Units


def make_rct(rid, y_treat, y_control, m=None, x=None, d=None, **kw):
    y = np.concatenate([np.asarray(y_treat, float), np.asarray(y_control, float)])
    t = np.r_[np.ones(len(y_treat)), np.zeros(len(y_control))]
    x = np.zeros(len(y)) if x is None else np.asarray(x, float)
    d = np.zeros(len(y)) if d is None else np.asarray(d, float)
    units = Units.from_arrays(x, d, y, t)
    return Rct(rid, units, len(y) if m is None else m, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_corpus(rng):
    rcts = []
    for i in range(6):
        n = 40 + 7 * i
        x = rng.pareto(1.5, n) + 1
        d = rng.pareto(1.5, n)
        t = np.zeros(n)
        t[rng.permutation(n)[: n // 2]] = 1
        y = x + rng.normal(0, 1, n) + 0.5 * t
        rcts.append(Rct(f"r{i}", Units.from_arrays(x, d, y, t), 10 * n, time_index=i))
    return Corpus(rcts)


# Acceptance criteria report one line each at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
