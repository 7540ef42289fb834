import numpy as np
import pytest

from qpanel.panel import GroupedPanel


def random_unbalanced_panel(rng, m=None, K1=None, K2=None, n_min=6, n_max=25, with_z=False):
    """Random unbalanced panel with group-level regressors and an intercept."""
    m = int(rng.integers(8, 20)) if m is None else m
    K1 = int(rng.integers(1, 4)) if K1 is None else K1
    K2 = int(rng.integers(1, 3)) if K2 is None else K2
    counts = rng.integers(n_min, n_max + 1, size=m)
    groups = np.repeat(np.arange(m), counts)
    N = groups.size
    a = rng.normal(size=m)
    X2 = rng.normal(size=(m, K2))[groups]
    X1 = rng.normal(size=(N, K1)) + 0.7 * a[groups, None]
    y = X1 @ rng.normal(size=K1) + X2 @ rng.normal(size=K2) + a[groups] + rng.standard_t(5, size=N)
    Z = rng.normal(size=(m, 1))[groups] + 0.5 * X2[:, :1] if with_z else None
    # shuffle rows so the panel constructor has to regroup them
    perm = rng.permutation(N)
    return GroupedPanel.from_arrays(
        y[perm], X1[perm], X2[perm], groups[perm],
        Z_ext=None if Z is None else Z[perm],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_panel(rng):
    return random_unbalanced_panel(rng, m=12, K1=2, K2=1, n_min=30, n_max=40)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        line, details = mod.RESULTS[number]
        terminalreporter.write_line(line)
        for d in details:
            terminalreporter.write_line("    " + d)
